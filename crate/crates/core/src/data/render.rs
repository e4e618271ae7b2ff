use super::{BBox, Payload, Scene};

/// Single-channel raster of a scene with patch payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Canvas {
    /// Nearest-neighbour upscales every object patch into its box, in object
    /// order. `None` unless the scene carries patches.
    pub fn render(scene: &Scene) -> Option<Canvas> {
        let Payload::Patches { patch_dim, patches } = &scene.payload else {
            return None;
        };
        let (w, h) = (scene.width.ceil() as usize, scene.height.ceil() as usize);
        let mut pixels = vec![0.0; w * h];
        let pd = *patch_dim;
        for (obj, patch) in scene.objects.iter().zip(patches) {
            let b = obj.bbox;
            let px0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
            let py0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
            for py in py0..h {
                let cy = py as f64 + 0.5;
                if cy >= b.y2 {
                    break;
                }
                let row = (((cy - b.y1) / b.height()) * pd as f64) as usize;
                for px in px0..w {
                    let cx = px as f64 + 0.5;
                    if cx >= b.x2 {
                        break;
                    }
                    let col = (((cx - b.x1) / b.width()) * pd as f64) as usize;
                    pixels[py * w + px] = patch[row.min(pd - 1) * pd + col.min(pd - 1)];
                }
            }
        }
        Some(Canvas {
            width: w,
            height: h,
            pixels,
        })
    }
}

/// Area-weighted pixel coverage of `n` equal bins spanning `[lo, hi)`.
fn bin_weights(lo: f64, hi: f64, n: usize, limit: usize) -> Vec<Vec<(usize, f64)>> {
    let step = (hi - lo) / n as f64;
    (0..n)
        .map(|b| {
            let a = lo + b as f64 * step;
            let z = a + step;
            let first = a.floor().max(0.0) as usize;
            let last = (z.ceil().max(0.0) as usize).min(limit);
            (first..last)
                .filter_map(|p| {
                    let overlap = (z.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / step))
                })
                .collect()
        })
        .collect()
}

/// Average-pools the canvas under `region` onto an `out_dim × out_dim` grid.
/// Area outside the canvas counts as zero intensity.
pub fn pool_region(canvas: &Canvas, region: &BBox, out_dim: usize) -> Vec<f64> {
    let wx = bin_weights(region.x1, region.x2, out_dim, canvas.width);
    let wy = bin_weights(region.y1, region.y2, out_dim, canvas.height);
    let mut out = vec![0.0; out_dim * out_dim];
    for (by, ys) in wy.iter().enumerate() {
        for (bx, xs) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(py, wyv) in ys {
                let row = &canvas.pixels[py * canvas.width..(py + 1) * canvas.width];
                for &(px, wxv) in xs {
                    acc += wyv * wxv * row[px];
                }
            }
            out[by * out_dim + bx] = acc;
        }
    }
    out
}

impl Scene {
    /// Backbone input for each region.
    ///
    /// Patch scenes are rendered and average-pooled; feature scenes return the
    /// feature of the best-overlapping object scaled by that overlap (zeros
    /// when nothing overlaps).
    pub fn region_inputs(&self, regions: &[BBox], input_dim: usize) -> Vec<Vec<f64>> {
        match &self.payload {
            Payload::Patches { patch_dim, .. } => {
                let canvas = Canvas::render(self).expect("patch payload renders");
                regions
                    .iter()
                    .map(|r| pool_region(&canvas, r, *patch_dim))
                    .collect()
            }
            Payload::Features(features) => regions
                .iter()
                .map(|r| {
                    let best = self
                        .objects
                        .iter()
                        .enumerate()
                        .map(|(i, o)| (i, o.bbox.iou(r)))
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    match best {
                        Some((i, iou)) if iou > 0.0 => features[i].iter().map(|v| v * iou).collect(),
                        _ => vec![0.0; input_dim],
                    }
                })
                .collect(),
            Payload::None => vec![vec![0.0; input_dim]; regions.len()],
        }
    }
}
