//! Flat parameter vectors with named segment views, and their on-disk form.
//!
//! The file format is a short text header followed by raw little-endian
//! `f64` values:
//!
//! ```text
//! amid-params 1
//! segment W1 64 25
//! segment b1 64
//! end_header
//! <8 * len bytes>
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, shape: &[usize]) -> Self {
        self.push(name, shape);
        self
    }

    pub fn push(&mut self, name: &str, shape: &[usize]) -> &Segment {
        let seg = Segment {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.len,
        };
        self.len += seg.len();
        self.segments.push(seg);
        self.segments.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn view<'a>(&self, name: &str, flat: &'a [f64]) -> Option<&'a [f64]> {
        self.segment(name).map(|s| &flat[s.range()])
    }

    /// Splits a flat vector into per-segment vectors.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Vec<f64>>> {
        if flat.len() != self.len {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layout needs {}",
                flat.len(),
                self.len
            )));
        }
        Ok(self.segments.iter().map(|s| flat[s.range()].to_vec()).collect())
    }

    pub fn flatten(&self, parts: &[Vec<f64>]) -> Result<Vec<f64>> {
        if parts.len() != self.segments.len()
            || parts.iter().zip(&self.segments).any(|(p, s)| p.len() != s.len())
        {
            return Err(Error::Shape("segment sizes do not match layout".into()));
        }
        Ok(parts.concat())
    }
}

pub fn write_params(path: &Path, layout: &ParamLayout, values: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params_to(&mut out, layout, values)?;
    out.flush()?;
    Ok(())
}

pub fn write_params_to(out: &mut impl Write, layout: &ParamLayout, values: &[f64]) -> Result<()> {
    if values.len() != layout.len() {
        return Err(Error::Shape(format!(
            "writing {} values with a layout of {}",
            values.len(),
            layout.len()
        )));
    }
    writeln!(out, "amid-params 1")?;
    for seg in layout.segments() {
        let dims: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "segment {} {}", seg.name, dims.join(" "))?;
    }
    writeln!(out, "end_header")?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params(path: &Path) -> Result<(ParamLayout, Vec<f64>)> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    read_params_from(&mut input)
}

pub fn read_params_from(input: &mut impl BufRead) -> Result<(ParamLayout, Vec<f64>)> {
    let bad = |msg: &str| Error::Invalid(format!("parameter file: {msg}"));
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != "amid-params 1" {
        return Err(bad("missing magic line"));
    }
    let mut layout = ParamLayout::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(bad("header not terminated"));
        }
        let text = line.trim_end();
        if text == "end_header" {
            break;
        }
        let mut words = text.split_whitespace();
        if words.next() != Some("segment") {
            return Err(bad(&format!("unexpected header line {text:?}")));
        }
        let name = words.next().ok_or_else(|| bad("segment without a name"))?;
        let shape = words
            .map(|w| w.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("segment shape is not a list of integers"))?;
        layout.push(name, &shape);
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * layout.len() {
        return Err(bad(&format!(
            "expected {} bytes of data, found {}",
            8 * layout.len(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((layout, values))
}
