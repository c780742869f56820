//! PGM images and the CSV reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::profiler::{ModuleBreakdown, TemporalPoint};
use crate::tensor::Tensor;
use crate::token_prune::TokenSelection;

/// Parses a binary (P5) PGM with maxval ≤ 255 into a `[h × w]` tensor of
/// intensities scaled to [0, 1].
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut next_token = || -> Result<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::input("truncated PGM header"));
        }
        Ok(&bytes[start..pos])
    };
    if next_token()? != b"P5" {
        return Err(Error::input("not a binary PGM (expected P5 magic)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        std::str::from_utf8(next_token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::input(format!("bad PGM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::input(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() == w * h)
        .ok_or_else(|| Error::input(format!("PGM raster is not {w}×{h} bytes")))?;
    let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    Tensor::new(vec![h, w], data)
}

/// Parses a PGM and checks it is `size × size`.
pub fn parse_image(bytes: &[u8], size: usize) -> Result<Tensor> {
    let img = parse_pgm(bytes)?;
    if img.dims() != [size, size] {
        return Err(Error::input(format!(
            "image is {}×{}, model expects {size}×{size}",
            img.cols(),
            img.rows()
        )));
    }
    Ok(img)
}

/// Encodes raw bytes as a P5 PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Quantizes a `[h × w]` tensor with values in [0, 1] to a PGM.
pub fn image_to_pgm(img: &Tensor) -> Result<Vec<u8>> {
    if img.dims().len() != 2 {
        return Err(Error::shape("image must be 2-D"));
    }
    let px: Vec<u8> = img
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode_pgm(img.cols(), img.rows(), &px)
}

/// One byte per patch on the `grid × grid` raster: 255 retained, 0 dropped.
pub fn token_mask_pgm(selection: &TokenSelection, grid: usize) -> Result<Vec<u8>> {
    let mut px = vec![0u8; grid * grid];
    for &i in &selection.pruned {
        *px.get_mut(i)
            .ok_or_else(|| Error::input(format!("token {i} outside a {grid}×{grid} grid")))? = 255;
    }
    encode_pgm(grid, grid, &px)
}

pub fn importance_csv(scores: &[f64]) -> String {
    let mut s = String::from("layer_index,importance\n");
    for (i, v) in scores.iter().enumerate() {
        writeln!(s, "{i},{v:.6}").unwrap();
    }
    s
}

pub fn selection_csv(selection: &TokenSelection) -> String {
    let mut s = String::from("token_index,set\n");
    for (i, set) in selection.labelled() {
        writeln!(s, "{i},{}", set.as_str()).unwrap();
    }
    s
}

/// `horizon` rows of `action_dim` comma-separated values, no header.
pub fn actions_csv(actions: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..actions.rows() {
        let row: Vec<String> = actions.row(r).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Inverse of [`actions_csv`].
pub fn parse_actions_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f32>().map_err(|e| Error::input(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

pub fn layer_similarity_csv(cos: &[f64]) -> String {
    let mut s = String::from("layer,cos\n");
    for (i, v) in cos.iter().enumerate() {
        writeln!(s, "{i},{v:.6}").unwrap();
    }
    s
}

pub fn temporal_similarity_csv(points: &[TemporalPoint]) -> String {
    let mut s = String::from("t,kind,cos\n");
    for p in points {
        writeln!(s, "{},{},{:.6}", p.t, p.kind.as_str(), p.cos).unwrap();
    }
    s
}

/// CSV mirror of a breakdown: `stage,params,tokens,steps,time_ms,flops`.
pub fn breakdown_csv(b: &ModuleBreakdown) -> String {
    let mut s = String::from("stage,params,tokens,steps,time_ms,flops\n");
    for (name, r) in b.stages() {
        writeln!(s, "{name},{},{},{},{:.3},{}", r.params, r.tokens, r.steps, r.time_ms, r.flops).unwrap();
    }
    s
}
