//! LayerCAM saliency: location-wise ReLU'd gradients weight each stage's
//! activations, the weighted channel sum is rectified, brought to Fbank
//! resolution, normalised to `[0, 1]` and averaged over the four stages.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dsp::FbankMatrix;
use crate::error::{Error, Result};
use crate::net::{Mode, SpeakerNet};

/// Which map a [`SaliencyMap`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Stage 1 to 4 of the network.
    Stage(u8),
    Fused,
    /// A constant mask, used as the unmasked baseline.
    Constant,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSource::Stage(k) => write!(f, "stage{k}"),
            MapSource::Fused => f.write_str("fused"),
            MapSource::Constant => f.write_str("constant"),
        }
    }
}

impl FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(MapSource::Fused),
            "constant" => Ok(MapSource::Constant),
            _ => match s.strip_prefix("stage").and_then(|k| k.parse::<u8>().ok()) {
                Some(k @ 1..=4) => Ok(MapSource::Stage(k)),
                _ => Err(Error::InvalidArgument(format!("unknown map source {s:?}"))),
            },
        }
    }
}

/// A real-valued 2-D grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("grid", rows * cols, values.len()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Saliency over an Fbank matrix: `frames x n_mels` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    frames: usize,
    n_mels: usize,
    values: Vec<f64>,
    target_class: usize,
    source: MapSource,
}

impl SaliencyMap {
    pub fn new(frames: usize, n_mels: usize, values: Vec<f64>, target_class: usize, source: MapSource) -> Result<Self> {
        if values.len() != frames * n_mels {
            return Err(Error::shape("saliency map", frames * n_mels, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            n_mels,
            values,
            target_class,
            source,
        })
    }

    /// Constant mask of the given shape.
    pub fn constant(frames: usize, n_mels: usize, value: f64) -> Result<Self> {
        Self::new(frames, n_mels, vec![value; frames * n_mels], 0, MapSource::Constant)
    }

    pub fn from_grid(grid: Grid, target_class: usize, source: MapSource) -> Result<Self> {
        Self::new(grid.rows, grid.cols, grid.values, target_class, source)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn source(&self) -> MapSource {
        self.source
    }

    /// Mean absolute difference to another map of the same shape.
    pub fn l1_distance(&self, other: &SaliencyMap) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("l1_distance", self.shape(), other.shape()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.values.len().max(1) as f64)
    }
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [1, c, h, w] | [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("layer_saliency", "[1, C, H, W] or [C, H, W]", s)),
    }
}

/// `ReLU(sum_k ReLU(grad_k) * act_k)` at the stage's own resolution.
pub fn layer_saliency(activation: &Tensor, gradient: &Tensor) -> Result<Grid> {
    if activation.shape() != gradient.shape() {
        return Err(Error::shape("layer_saliency gradient", activation.shape(), gradient.shape()));
    }
    let (c, h, w) = chw(activation)?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for k in 0..c {
        let a = &activation.data()[k * plane..(k + 1) * plane];
        let g = &gradient.data()[k * plane..(k + 1) * plane];
        for ((o, &av), &gv) in out.iter_mut().zip(a).zip(g) {
            *o += gv.max(0.0) * av;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Grid::new(h, w, out)
}

/// Min-max scaling to `[0, 1]`; a constant grid maps to all zeros.
pub fn normalize01(grid: &Grid) -> Result<Grid> {
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize01 input"));
    }
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if hi > lo {
        grid.values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; grid.values.len()]
    };
    Grid::new(grid.rows, grid.cols, values)
}

/// Source coordinate and interpolation weight of each target index
/// (corner-aligned: first and last samples coincide).
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (x.floor() as usize).min(src - 2);
            (i0, i0 + 1, x - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling with aligned corners.
pub fn upsample_to(grid: &Grid, rows: usize, cols: usize) -> Result<Grid> {
    if rows < grid.rows || cols < grid.cols {
        return Err(Error::InvalidArgument(format!(
            "upsample_to cannot shrink {}x{} to {rows}x{cols}",
            grid.rows, grid.cols
        )));
    }
    if grid.rows == 0 || grid.cols == 0 {
        return Grid::new(rows, cols, vec![0.0; rows * cols]);
    }
    if (rows, cols) == (grid.rows, grid.cols) {
        return Ok(grid.clone());
    }
    let rw = axis_weights(grid.rows, rows);
    let cw = axis_weights(grid.cols, cols);
    let mut values = Vec::with_capacity(rows * cols);
    for &(r0, r1, fr) in &rw {
        for &(c0, c1, fc) in &cw {
            let top = grid.get(r0, c0) * (1.0 - fc) + grid.get(r0, c1) * fc;
            let bottom = grid.get(r1, c0) * (1.0 - fc) + grid.get(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Grid::new(rows, cols, values)
}

/// The fused map and the four normalised stage maps it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSaliency {
    pub fused: SaliencyMap,
    pub stages: [SaliencyMap; 4],
}

/// Elementwise mean of stage maps of equal shape.
pub fn fuse(stages: &[SaliencyMap], target_class: usize) -> Result<SaliencyMap> {
    let first = stages.first().ok_or_else(|| Error::InvalidArgument("no stage maps to fuse".into()))?;
    let (frames, n_mels) = first.shape();
    let mut values = vec![0.0; frames * n_mels];
    for s in stages {
        if s.shape() != first.shape() {
            return Err(Error::shape("fuse", first.shape(), s.shape()));
        }
        values.iter_mut().zip(&s.values).for_each(|(v, x)| *v += x);
    }
    let n = stages.len() as f64;
    values.iter_mut().for_each(|v| *v = (*v / n).clamp(0.0, 1.0));
    SaliencyMap::new(frames, n_mels, values, target_class, MapSource::Fused)
}

/// LayerCAM saliency of `target_class`'s logit with respect to the four
/// stage outputs, computed with the model's frozen (running) statistics.
pub fn fused_saliency(model: &SpeakerNet, features: &FbankMatrix, target_class: usize) -> Result<FusedSaliency> {
    let n_classes = model.config().n_speakers;
    if target_class >= n_classes {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            n_classes,
        });
    }
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, model.input_tensor(&[features])?, Mode::Eval)?;
    let score = tape.select(pass.logits, 0, target_class)?;
    let grads = tape.backward(score, &pass.taps)?;
    let (frames, n_mels) = features.shape();
    let mut stages = Vec::with_capacity(4);
    for (k, &tap) in pass.taps.iter().enumerate() {
        let grad = grads.get(tap).expect("requested gradient");
        let raw = layer_saliency(tape.value(tap), grad)?;
        let norm = normalize01(&upsample_to(&raw, frames, n_mels)?)?;
        stages.push(SaliencyMap::from_grid(norm, target_class, MapSource::Stage(k as u8 + 1))?);
    }
    let fused = fuse(&stages, target_class)?;
    let stages: [SaliencyMap; 4] = stages.try_into().expect("four stages");
    Ok(FusedSaliency { fused, stages })
}

const GRID_MAGIC: &str = "spkcam-saliency";

/// Portable grid file: one text header line
/// `spkcam-saliency rows=R cols=C class=K source=S`, then `R * C`
/// little-endian `f32` values in row-major (frame-major) order.
pub fn write_grid(map: &SaliencyMap, mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "{GRID_MAGIC} rows={} cols={} class={} source={}",
        map.frames, map.n_mels, map.target_class, map.source
    )?;
    let mut buf = Vec::with_capacity(map.values.len() * 4);
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid(mut r: impl Read) -> Result<SaliencyMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::InvalidArgument("grid file: missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::InvalidArgument("grid file: header not UTF-8".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(GRID_MAGIC) {
        return Err(Error::InvalidArgument("grid file: bad magic".into()));
    }
    let mut get = |key: &str| -> Result<String> {
        let field = fields.next().unwrap_or_default();
        field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| Error::InvalidArgument(format!("grid file: expected {key}=, found {field:?}")))
    };
    let parse = |key: &str, v: String| v.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("grid file: bad {key}")));
    let rows = parse("rows", get("rows")?)?;
    let cols = parse("cols", get("cols")?)?;
    let class = parse("class", get("class")?)?;
    let source: MapSource = get("source")?.parse()?;
    let body = &bytes[nl + 1..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Truncated {
            expected: (rows * cols * 4) as u64,
            found: body.len() as u64,
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    SaliencyMap::new(rows, cols, values, class, source)
}

/// 8-bit binary PGM with time running left to right and the highest mel
/// band in the top row.
pub fn write_pgm(map: &SaliencyMap, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.frames, map.n_mels)?;
    let mut buf = Vec::with_capacity(map.values.len());
    for m in (0..map.n_mels).rev() {
        for t in 0..map.frames {
            buf.push((map.get(t, m) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// One line per frame, one comma-separated column per mel band.
pub fn write_csv(map: &SaliencyMap, mut w: impl Write) -> Result<()> {
    for t in 0..map.frames {
        let line: Vec<String> = map.row(t).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize, v: &[f64]) -> Grid {
        Grid::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn negative_gradients_give_zero_map() {
        let a = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let g = Tensor::new(vec![1, 2, 2, 2], vec![-1.0; 8]).unwrap();
        assert!(layer_saliency(&a, &g).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_case() {
        let a = Tensor::full(&[1, 1, 3, 2], 1.0);
        let m = layer_saliency(&a, &a).unwrap();
        assert_eq!(m.values, vec![1.0; 6]);
        assert!(layer_saliency(&a, &Tensor::full(&[1, 1, 2, 3], 1.0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&grid(1, 3, &[0.0, 5.0, 10.0])).unwrap().values, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&grid(1, 3, &[4.0; 3])).unwrap().values, vec![0.0; 3]);
        assert!(normalize01(&grid(1, 2, &[0.0, f64::NAN])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let g = grid(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let up = upsample_to(&g, 2, 4).unwrap();
        // Corner-aligned bilinear weights: target column j samples source x = j * (2-1)/(4-1).
        let expected_row: Vec<f64> = (0..4).map(|j| j as f64 / 3.0).collect();
        for r in 0..2 {
            for c in 0..4 {
                assert!((up.get(r, c) - expected_row[c]).abs() < 1e-12);
            }
        }
        assert_eq!(upsample_to(&g, 2, 2).unwrap(), g);
        assert!(upsample_to(&g, 1, 4).is_err());
        let c = upsample_to(&grid(2, 3, &[0.7; 6]), 9, 11).unwrap();
        assert!(c.values.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn fuse_identical_maps() {
        let m = SaliencyMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4], 1, MapSource::Stage(1)).unwrap();
        let f = fuse(&[m.clone(), m.clone(), m.clone(), m.clone()], 1).unwrap();
        for (a, b) in f.values().iter().zip(m.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let m = SaliencyMap::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125], 5, MapSource::Fused).unwrap();
        let mut buf = Vec::new();
        write_grid(&m, &mut buf).unwrap();
        assert!(buf.starts_with(b"spkcam-saliency rows=3 cols=2 class=5 source=fused\n"));
        assert_eq!(read_grid(&buf[..]).unwrap(), m);
        assert!(read_grid(&buf[..buf.len() - 1]).is_err());
        let mut pgm = Vec::new();
        write_pgm(&m, &mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 6);
        // Top row is the highest mel band.
        assert_eq!(&pgm[11..14], &[64, 191, 32]);
    }

    proptest! {
        #[test]
        fn upsampled_values_stay_in_source_range(
            rows in 1usize..5, cols in 1usize..5, extra_r in 0usize..7, extra_c in 0usize..7, seed in any::<u64>()
        ) {
            let values: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0).collect();
            let g = Grid::new(rows, cols, values.clone()).unwrap();
            let up = upsample_to(&g, rows + extra_r, cols + extra_c).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(up.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            let n = normalize01(&up).unwrap();
            prop_assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
