//! PGM masks and CSV tables.

use std::io::{Read, Write};

use bachkit_core::mask::ForegroundMask;
use bachkit_core::matching::{MatchMap, MatchScope};
use bachkit_core::select::AnalysisGrid;
use bachkit_core::vital::LayerReport;
use bachkit_core::GridDims;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] bachkit_core::Error),
}

type Result<T> = std::result::Result<T, ExportError>;

/// Binary PGM of frame `t`: 255 foreground, 0 background.
pub fn mask_pgm(mask: &ForegroundMask, t: usize) -> Vec<u8> {
    let g = mask.grid;
    let mut out = format!("P5\n{} {}\n255\n", g.w, g.h).into_bytes();
    let start = t * g.frame_len();
    out.extend(
        mask.bits()[start..start + g.frame_len()]
            .iter()
            .map(|&b| if b { 255u8 } else { 0 }),
    );
    out
}

/// Parses a P5 mask written by [`mask_pgm`]; any nonzero sample is foreground.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let bad = |m: &str| ExportError::Invalid(format!("PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((h, w, data.iter().map(|&b| b != 0).collect()))
}

/// Flat mask table `t,h,w,fg`.
pub fn write_mask_csv<W: Write>(w: W, mask: &ForegroundMask) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "h", "w", "fg"])?;
    for (i, &b) in mask.bits().iter().enumerate() {
        let p = mask.grid.position(i);
        out.write_record([
            p.t.to_string(),
            p.h.to_string(),
            p.w.to_string(),
            u8::from(b).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a table written by [`write_mask_csv`] on `grid`.
pub fn read_mask_csv<R: Read>(r: R, grid: GridDims) -> Result<ForegroundMask> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["t", "h", "w", "fg"])?;
    let mut bits = vec![None; grid.len()];
    for rec in rdr.deserialize::<(usize, usize, usize, u8)>() {
        let (t, h, w, fg) = rec?;
        let p = bachkit_core::GridPosition::new(t, h, w);
        if !grid.contains(p) || fg > 1 {
            return Err(ExportError::Invalid(format!(
                "bad mask row {t},{h},{w},{fg}"
            )));
        }
        bits[grid.index(p)] = Some(fg == 1);
    }
    let bits = bits
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ExportError::Invalid("mask table does not cover every pixel".into()))?;
    Ok(ForegroundMask::new(grid, bits)?)
}

/// `step,layer,<metric>` table in step-major order.
pub fn write_grid_csv<W: Write>(w: W, grid: &AnalysisGrid) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "layer", grid.metric.as_str()])?;
    for s in 0..grid.steps {
        for l in 0..grid.depth {
            out.write_record([s.to_string(), l.to_string(), grid.get(s, l).to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a grid table; every `(step, layer)` cell must appear exactly once.
pub fn read_grid_csv<R: Read>(r: R) -> Result<AnalysisGrid> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() != 3
        || &headers[0] != "step"
        || &headers[1] != "layer"
        || headers[2].is_empty()
    {
        return Err(ExportError::Invalid(format!(
            "expected header step,layer,<metric>, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let metric = headers[2].to_string();
    let mut cells = Vec::new();
    for rec in rdr.deserialize::<(usize, usize, f64)>() {
        cells.push(rec?);
    }
    let steps = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let depth = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut values = vec![None; steps * depth];
    for (s, l, v) in cells {
        let slot = &mut values[s * depth + l];
        if slot.replace(v).is_some() {
            return Err(ExportError::Invalid(format!("duplicate cell ({s}, {l})")));
        }
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| {
                ExportError::Invalid(format!("missing cell ({}, {})", i / depth, i % depth))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisGrid::new(steps, depth, metric, values)?)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let got = rdr.headers()?;
    if got.iter().ne(want.iter().copied()) {
        return Err(ExportError::Invalid(format!(
            "expected header {}, found {}",
            want.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

/// One row per frame-video pixel: its frame and position, and the matched identity pixel.
pub fn write_match_csv<W: Write>(w: W, map: &MatchMap) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame", "src_h", "src_w", "dst_t", "dst_h", "dst_w"])?;
    for j in 0..map.len() {
        let (src, dst) = (map.grid.position(j), map.grid.position(map.get(j)));
        out.write_record(
            [src.t, src.h, src.w, dst.t, dst.h, dst.w]
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>(),
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_match_csv<R: Read>(r: R, grid: GridDims, scope: MatchScope) -> Result<MatchMap> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(
        &mut rdr,
        &["frame", "src_h", "src_w", "dst_t", "dst_h", "dst_w"],
    )?;
    let mut target = vec![None; grid.len()];
    for rec in rdr.deserialize::<[usize; 6]>() {
        let [t, h, w, dt, dh, dw] = rec?;
        let src = bachkit_core::GridPosition::new(t, h, w);
        let dst = bachkit_core::GridPosition::new(dt, dh, dw);
        if !grid.contains(src) || !grid.contains(dst) {
            return Err(ExportError::Invalid(format!(
                "row {src:?} -> {dst:?} outside the grid"
            )));
        }
        target[grid.index(src)] = Some(grid.index(dst));
    }
    let target = target
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ExportError::Invalid("match table does not cover every pixel".into()))?;
    Ok(MatchMap::new(grid, scope, target)?)
}

pub fn write_layer_report_csv<W: Write>(w: W, report: &LayerReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "score_skip", "baseline", "drop"])?;
    for (l, (s, d)) in report.score_skip.iter().zip(report.drops()).enumerate() {
        out.write_record([
            l.to_string(),
            s.to_string(),
            report.baseline.to_string(),
            d.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a layer report; rows must list layers `0..depth` in order with one baseline.
pub fn read_layer_report_csv<R: Read>(r: R) -> Result<LayerReport> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["layer", "score_skip", "baseline", "drop"])?;
    let mut scores = Vec::new();
    let mut baseline = None;
    for rec in rdr.deserialize::<(usize, f64, f64, f64)>() {
        let (l, s, b, _) = rec?;
        if l != scores.len() {
            return Err(ExportError::Invalid(format!("layer {l} out of order")));
        }
        if *baseline.get_or_insert(b) != b {
            return Err(ExportError::Invalid(format!(
                "layer {l} has a different baseline"
            )));
        }
        scores.push(s);
    }
    let baseline = baseline.ok_or_else(|| ExportError::Invalid("empty layer report".into()))?;
    Ok(LayerReport::new(baseline, scores)?)
}

/// `[layers] <key> = [...]` fragment for a run configuration file.
pub fn layers_fragment(key: &str, layers: &[usize]) -> String {
    let list = layers
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    format!("[layers]\n{key} = [{list}]\n")
}

pub fn kv_fragment(layers: &[usize]) -> String {
    layers_fragment("kv", layers)
}
