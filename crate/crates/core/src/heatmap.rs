//! Query–key similarity maps and the netpbm files they are read from and
//! written to.
//!
//! The map is taken at the second Grapher of the first stage, the highest
//! resolution grid: the query of one patch is compared with the keys of all
//! patches by per-head cosine similarity, averaged over heads.

use crate::aggregate::{cosine_scores, AggregatorKind};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Tape, Tensor};

pub const HEATMAP_STAGE: usize = 0;
pub const HEATMAP_GRAPHER: usize = 1;

/// Head-averaged cosine similarities on a patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SimilarityMap {
    /// Min-max scaled to `0..=255`. A flat map renders as all zeros.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if !(span > 1e-12 * hi.abs().max(1.0)) {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Similarity of the query at `(row, col)` to every key, for a single `[1, C, H, W]` image.
pub fn similarity_map(model: &Model, image: &Tensor, row: usize, col: usize) -> Result<SimilarityMap> {
    if image.rank() != 4 || image.shape()[0] != 1 {
        return Err(Error::input(format!(
            "heatmaps take one image of shape [1, C, H, W], got {:?}",
            image.shape()
        )));
    }
    let config = model.config();
    if config.aggregator != AggregatorKind::CrossAttention {
        return Err(Error::config(format!(
            "heatmaps need query and key projections, but the model aggregates with {}",
            config.aggregator
        )));
    }
    let grapher = model
        .architecture()
        .grapher(HEATMAP_STAGE, HEATMAP_GRAPHER)
        .ok_or_else(|| Error::config("the model has no second Grapher in its first stage"))?;
    let grid = &model.stage_graphs(image.shape()[2], image.shape()[3])?[HEATMAP_STAGE];
    let (height, width) = (grid.height, grid.width);
    if row >= height || col >= width {
        return Err(Error::input(format!(
            "query ({row}, {col}) is outside the {height}×{width} grid"
        )));
    }

    let tape = Tape::inference();
    let opts = ForwardOptions {
        capture_inputs: true,
        ..ForwardOptions::infer()
    };
    let out = model.forward(&tape, tape.constant(image.clone()), &opts)?;
    let rows = out
        .capture(&grapher.name)
        .ok_or_else(|| Error::Contract(format!("{} recorded no aggregation input", grapher.name)))?
        .clone();
    drop(out);

    let weight = |t: &str| model.params().get(&format!("{}.{t}", grapher.agg.name)).cloned();
    let values = query_key_similarity(&rows, &weight("wq")?, &weight("wk")?, config.heads, row * width + col)?;
    Ok(SimilarityMap { height, width, values })
}

/// Head-averaged cosine between the query of node `query` and the key of every
/// node, for node features `rows` of shape `[nodes, C]`.
pub fn query_key_similarity(rows: &Tensor, wq: &Tensor, wk: &Tensor, heads: usize, query: usize) -> Result<Vec<f64>> {
    if rows.rank() != 2 || query >= rows.shape()[0] {
        return Err(Error::input(format!(
            "query node {query} is outside features of shape {:?}",
            rows.shape()
        )));
    }
    let (nodes, c) = (rows.shape()[0], wq.shape()[1]);
    let tape = Tape::inference();
    let x = tape.constant(rows.clone());
    let keys = x.matmul(tape.constant(wk.clone()))?;
    let q = x.slice_rows(query, query + 1)?.matmul(tape.constant(wq.clone()))?.to_tensor();
    let repeated = Tensor::from_fn(&[nodes, c], |i| q.data()[i % c]);
    let scores = cosine_scores(tape.constant(repeated), keys, heads)?.to_tensor();
    Ok((0..nodes).map(|n| scores.row(n).iter().sum::<f64>() / heads as f64).collect())
}

/// Binary graymap (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::input(format!(
            "{} pixels for a {width}×{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// A decoded `P5` or `P6` image with samples scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

impl Netpbm {
    /// `[1, 3, H, W]` in `[0, 1]`; graymaps are replicated across channels.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let max = f64::from(self.maxval);
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            let ch = if self.channels == 1 { 0 } else { ch };
            f64::from(self.samples[p * self.channels + ch]) / max
        })
    }
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Netpbm> {
    let bad = |r: String| Error::format("netpbm image", r);
    let mut pos = 0;
    let mut token = || -> Result<String> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("netpbm image", "header ends early"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic `{other}`, expected P5 or P6"))),
    };
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| bad(format!("{what} `{t}` is not a number")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("empty {width}×{height} image")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(bad(format!("maxval {maxval} is outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() >= need)
        .ok_or_else(|| bad(format!("raster holds fewer than {need} bytes")))?;
    let samples: Vec<u16> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..need].iter().map(|&b| u16::from(b)).collect()
    };
    if let Some(&s) = samples.iter().find(|&&s| usize::from(s) > maxval) {
        return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips() {
        let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
        let bytes = encode_pgm(4, 3, &px).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels, img.maxval), (4, 3, 1, 255));
        assert_eq!(img.samples, px.iter().map(|&p| u16::from(p)).collect::<Vec<_>>());
    }

    #[test]
    fn ppm_with_comments_becomes_planar_rgb() {
        let mut bytes = b"P6 # rgb\n2 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51, 0, 255, 0]);
        let t = decode_netpbm(&bytes).unwrap().to_rgb_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
    }

    #[test]
    fn malformed_images_are_format_errors() {
        for bytes in [&b"P3\n1 1\n255\n0 0 0"[..], b"P5\n2 2\n255\n\x01", b"P5\n1 1\n", b"P5\n1 1\n9\n\xff"] {
            assert!(matches!(decode_netpbm(bytes), Err(Error::Format { .. })), "{bytes:?}");
        }
    }

    #[test]
    fn gray_scaling_hits_both_ends_and_flat_maps_to_zero() {
        let m = SimilarityMap {
            height: 1,
            width: 3,
            values: vec![-0.5, 0.25, 1.0],
        };
        assert_eq!(m.to_gray(), vec![0, 128, 255]);
        let flat = SimilarityMap {
            values: vec![0.7; 3],
            ..m
        };
        assert_eq!(flat.to_gray(), vec![0, 0, 0]);
    }

    #[test]
    fn identical_features_give_a_flat_map() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let wq = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let wk = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let node = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let rows = Tensor::from_fn(&[9, 6], |i| node.data()[i % 6]);
        let values = query_key_similarity(&rows, &wq, &wk, 3, 4).unwrap();
        assert!(values.iter().all(|&v| v == values[0]));
        let map = SimilarityMap {
            height: 3,
            width: 3,
            values,
        };
        assert_eq!(map.to_gray(), vec![0; 9]);
    }

    #[test]
    fn similarity_matches_a_direct_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, c, heads) = (5, 4, 2);
        let rows = Tensor::randn(&[n, c], 1.0, &mut rng);
        let wq = Tensor::randn(&[c, c], 1.0, &mut rng);
        let wk = Tensor::randn(&[c, c], 1.0, &mut rng);
        let project = |w: &Tensor, i: usize| -> Vec<f64> {
            (0..c).map(|o| (0..c).map(|k| rows.data()[i * c + k] * w.data()[k * c + o]).sum()).collect()
        };
        let got = query_key_similarity(&rows, &wq, &wk, heads, 2).unwrap();
        let q = project(&wq, 2);
        for j in 0..n {
            let k = project(&wk, j);
            let d = c / heads;
            let mean = (0..heads)
                .map(|h| {
                    let (a, b) = (&q[h * d..(h + 1) * d], &k[h * d..(h + 1) * d]);
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (na * nb)
                })
                .sum::<f64>()
                / heads as f64;
            assert!((got[j] - mean).abs() < 1e-12);
        }
    }
}
