//! File formats.
//!
//! - Heatmap dump: magic `HMAP`, then `u32` C, H, W (little endian), then
//!   C·H·W little-endian `f32` values, row-major per channel.
//! - Annotation file: one image per line, `id W H x,y[,v] x,y[,v] ...`.
//!   `v` is 1 visible, 2 occluded, 0 unlabeled.
//!
//! Writers go through [`write_atomic`] so an interrupted run never leaves a
//! partial file behind.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::heatmap::{Frame, LandmarkSet, Visibility};

pub const HEATMAP_MAGIC: &[u8; 4] = b"HMAP";

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn encode_heatmaps(data: &Array3<f64>) -> Vec<u8> {
    let (c, h, w) = data.dim();
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(HEATMAP_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_heatmaps(bytes: &[u8]) -> Result<Array3<f64>> {
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: format!("heatmap dump: {msg}"),
    };
    if bytes.len() < 16 || &bytes[..4] != HEATMAP_MAGIC {
        return Err(bad("missing HMAP header"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * n, body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), values).expect("length checked"))
}

pub fn write_heatmaps(path: &Path, data: &Array3<f64>) -> Result<()> {
    Ok(write_atomic(path, &encode_heatmaps(data))?)
}

pub fn read_heatmaps(path: &Path) -> Result<Array3<f64>> {
    decode_heatmaps(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: String,
    pub frame: Frame,
    pub landmarks: LandmarkSet,
}

fn parse_line(line: &str, n: usize) -> Result<Annotation> {
    let err = |msg: String| Error::Parse { line: n, msg };
    let mut tokens = line.split_whitespace().map(|t| t.trim_end_matches(','));
    let id = tokens
        .next()
        .ok_or_else(|| err("missing image id".into()))?
        .to_string();
    let mut dim = |what: &str| -> Result<usize> {
        let t = tokens.next().ok_or_else(|| err(format!("missing frame {what}")))?;
        t.parse().map_err(|e| err(format!("bad frame {what} '{t}': {e}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let mut points = Vec::new();
    let mut vis = Vec::new();
    let mut any_vis = false;
    for tok in tokens {
        let fields: Vec<&str> = tok.split(',').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!("point '{tok}' is not x,y[,v]")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| err(format!("bad coordinate '{s}': {e}")))
        };
        points.push([num(fields[0])?, num(fields[1])?]);
        let v = match fields.get(2) {
            Some(s) => {
                any_vis = true;
                s.parse::<u8>()
                    .ok()
                    .and_then(Visibility::from_code)
                    .ok_or_else(|| err(format!("bad visibility '{s}'")))?
            }
            None => Visibility::Visible,
        };
        vis.push(v);
    }
    let landmarks = if any_vis {
        LandmarkSet::with_visibility(points, vis)?
    } else {
        LandmarkSet::new(points)
    };
    Ok(Annotation {
        id,
        frame: Frame::new(height, width),
        landmarks,
    })
}

/// Parses an annotation file. Blank lines and `#` comments are skipped; all
/// lines must carry the same number of points.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let a = parse_line(t, i + 1)?;
        if let Some(first) = out.first() {
            if first.landmarks.len() != a.landmarks.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!(
                        "{} landmarks, earlier lines have {}",
                        a.landmarks.len(),
                        first.landmarks.len()
                    ),
                });
            }
        }
        out.push(a);
    }
    Ok(out)
}

pub fn format_annotations(items: &[Annotation]) -> String {
    let mut s = String::new();
    for a in items {
        s.push_str(&format!("{} {} {}", a.id, a.frame.width, a.frame.height));
        for (i, p) in a.landmarks.points().iter().enumerate() {
            match a.landmarks.visibility() {
                Some(v) => s.push_str(&format!(" {},{},{}", p[0], p[1], v[i].code())),
                None => s.push_str(&format!(" {},{}", p[0], p[1])),
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn write_annotations(path: &Path, items: &[Annotation]) -> Result<()> {
    Ok(write_atomic(path, format_annotations(items).as_bytes())?)
}

/// Minimal CSV builder; fields are written with `Display`, which prints the
/// shortest representation that round-trips.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Self::default();
        c.row(header.iter());
        c
    }

    pub fn row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: std::fmt::Display,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            self.buf.push_str(&f.to_string());
        }
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, self.buf.as_bytes())?)
    }
}
