//! Concrete games.

pub mod auction;
pub mod beachbar;
pub mod smooth;
pub mod tabular;

pub use auction::{AuctionConfig, AuctionEnv};
pub use beachbar::{BeachBar, BeachBarConfig};
pub use smooth::SmoothGame;
pub use tabular::TabularGame;
