use std::path::{Path, PathBuf};

use super::image::{draw_box, to_gray, upscale, write_pgm, write_ppm};
use super::model::Detector;
use super::scene::SyntheticScene;
use crate::attention::{scale_ratio_stats, ScaleRatioHistogram};
use crate::error::Result;
use crate::head::{decode, DecodeConfig};
use crate::tensor::{Tape, Tensor};

/// Scene images are written at this multiple of their size.
const SCENE_ZOOM: usize = 4;
/// Detections drawn on the scene images need at least this score.
const DRAW_SCORE: f64 = 0.3;

const CLASS_COLORS: [[u8; 3]; 4] = [[0, 220, 0], [0, 160, 255], [255, 200, 0], [255, 0, 255]];
const DETECTION_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Clone, Debug)]
pub struct DumpSummary {
    pub scenes: usize,
    pub blocks: usize,
    /// Every file written, in order.
    pub files: Vec<PathBuf>,
    /// Level-weight ratio histogram of each block; `None` where the block
    /// has no scale attention.
    pub histograms: Vec<Option<ScaleRatioHistogram>>,
}

/// Channel mean of an `[L, H, W, C]` tensor, each level min-max normalised
/// on its own and the levels tiled left to right, upscaled by `zoom`.
/// Returns `(width, height, pixels)`.
pub fn level_map_image(features: &Tensor, zoom: usize) -> (usize, usize, Vec<u8>) {
    let s = features.shape();
    let (l, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut tiled = vec![0u8; l * h * w];
    for lv in 0..l {
        let means: Vec<f64> = features.data()[lv * h * w * c..(lv + 1) * h * w * c]
            .chunks(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        let gray = to_gray(&means);
        for y in 0..h {
            for x in 0..w {
                tiled[y * l * w + lv * w + x] = gray[y * w + x];
            }
        }
    }
    (l * w * zoom, h * zoom, upscale(&tiled, h, l * w, 1, zoom))
}

fn scene_image(scene: &SyntheticScene) -> Vec<u8> {
    scene
        .image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes, per scene, the annotated image (`scene_NNN.ppm`: ground truth in
/// class colours, detections in red), the channel-mean map of the aligned
/// input (`scene_NNN_input.pgm`) and of every block output
/// (`scene_NNN_block_B.pgm`, `B` from 1), then one level-weight ratio
/// histogram per block with scale attention (`scale_ratios_block_B.csv`).
pub fn dump_attention(det: &Detector, scenes: &[SyntheticScene], dir: &Path) -> Result<DumpSummary> {
    std::fs::create_dir_all(dir)?;
    let blocks = det.stack.blocks.len();
    let zoom = (64 / det.grid.height.max(1)).max(1);
    let cfg = DecodeConfig::default();
    let mut files = Vec::new();
    let mut weights: Vec<Vec<Tensor>> = vec![Vec::new(); blocks];

    for (i, scene) in scenes.iter().enumerate() {
        let mut tape = Tape::new();
        let f = det.forward(&mut tape, &scene.image)?;

        let size = scene.image.shape()[0];
        let mut rgb = upscale(&scene_image(scene), size, size, 3, SCENE_ZOOM);
        let side = size * SCENE_ZOOM;
        let zoomed = |b: [f64; 4]| b.map(|v| v * SCENE_ZOOM as f64);
        for (b, &class) in scene.gt.boxes.iter().zip(&scene.gt.classes) {
            draw_box(&mut rgb, side, side, zoomed(*b), CLASS_COLORS[class % CLASS_COLORS.len()]);
        }
        for d in decode(&f.outputs.values(&tape), &det.grid, &cfg) {
            if d.score >= DRAW_SCORE {
                draw_box(&mut rgb, side, side, zoomed(d.bbox), DETECTION_COLOR);
            }
        }
        let path = dir.join(format!("scene_{i:03}.ppm"));
        write_ppm(&path, side, side, &rgb)?;
        files.push(path);

        let mut maps = vec![("input".to_string(), f.aligned)];
        maps.extend(f.traces.iter().enumerate().map(|(b, t)| (format!("block_{}", b + 1), t.output)));
        for (name, var) in maps {
            let (w, h, px) = level_map_image(tape.value(var), zoom);
            let path = dir.join(format!("scene_{i:03}_{name}.pgm"));
            write_pgm(&path, w, h, &px)?;
            files.push(path);
        }
        for (b, t) in f.traces.iter().enumerate() {
            if let Some(w) = t.scale_weights {
                weights[b].push(tape.value(w).clone());
            }
        }
    }

    let mut histograms = Vec::with_capacity(blocks);
    for (b, w) in weights.iter().enumerate() {
        if w.is_empty() {
            histograms.push(None);
            continue;
        }
        let hist = scale_ratio_stats(w)?;
        let path = dir.join(format!("scale_ratios_block_{}.csv", b + 1));
        std::fs::write(&path, hist.to_csv())?;
        files.push(path);
        histograms.push(Some(hist));
    }
    Ok(DumpSummary {
        scenes: scenes.len(),
        blocks,
        files,
        histograms,
    })
}
