//! Heatmap overlays: min-max normalized map through a jet-style colormap,
//! alpha-blended onto the source image.

use std::path::Path;

use crate::data::images::save_rgb;
use crate::error::Result;
use crate::tensor::{bilinear_resize, Tensor};

const BLEND_ALPHA: f64 = 0.5;

/// Jet-style colormap: 0 maps to deep blue, 1 to deep red.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let c = |x: f64| x.clamp(0.0, 1.0);
    [
        c(1.5 - (4.0 * v - 3.0).abs()),
        c(1.5 - (4.0 * v - 2.0).abs()),
        c(1.5 - (4.0 * v - 1.0).abs()),
    ]
}

/// Blend a score map over an image. The map is min-max normalized (a
/// constant map renders as the colormap origin) and resized to the image
/// dimensions if needed.
pub fn blend_heatmap(map: &Tensor, image: &Tensor) -> Tensor {
    assert_eq!(map.rank(), 2);
    assert_eq!(image.rank(), 3);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let resized = if map.shape() == [h, w] {
        map.clone()
    } else {
        bilinear_resize(map, h, w)
    };
    let lo = resized.min();
    let hi = resized.max();
    let span = hi - lo;
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let v = if span > 0.0 {
                (resized.at(&[y, x]) - lo) / span
            } else {
                0.0
            };
            let c = colormap(v);
            for ch in 0..3 {
                let blended =
                    (1.0 - BLEND_ALPHA) * image.at(&[y, x, ch]) + BLEND_ALPHA * c[ch];
                out.set(&[y, x, ch], blended.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Write the blended overlay as a PNG.
pub fn render_heatmap(map: &Tensor, image: &Tensor, out: &Path) -> Result<()> {
    save_rgb(out, &blend_heatmap(map, image))
}
