use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{write_file, PairSample};
use crate::error::{Error, Result};
use crate::grid::{warp_nearest, warp_trilinear, DisplacementField, LabelMap, Volume};
use crate::metrics::{brain_mask, dice_score, mean_disp, ndv_pct, NdvMode};
use crate::tensor::Dims3;

/// Pixels per voxel in the rendered panels.
const UPSCALE: u32 = 4;
/// Lattice spacing of the warped-grid panel, in voxels.
const GRID_STEP: usize = 4;

/// Numbers printed next to the panels; taken from the metrics module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureAnnotations {
    pub method: String,
    pub pair_id: String,
    pub slice_z: usize,
    /// Volume Dice of the moved labels; absent without label maps.
    pub dsc: Option<f64>,
    /// Mean displacement magnitude over the target foreground.
    pub mean_disp: f64,
    /// Folding percentage over the target foreground.
    pub ndv_pct: f64,
    pub panels: Vec<PathBuf>,
}

/// `target - moved`, clipped to [-1, 1].
pub fn error_map(target: &Volume, moved: &Volume) -> Result<Vec<f64>> {
    if target.dims() != moved.dims() {
        return Err(Error::shape(format!("error map of {} and {}", target.dims(), moved.dims())));
    }
    Ok(target.data().iter().zip(moved.data()).map(|(t, m)| (t - m).clamp(-1.0, 1.0)).collect())
}

/// In-plane lattice (lines every few voxels along x and y) warped by `field`.
pub fn grid_image(field: &DisplacementField) -> Result<Volume> {
    let d = field.dims();
    let lattice: Vec<f64> =
        d.iter().map(|(x, y, _)| if x % GRID_STEP == 0 || y % GRID_STEP == 0 { 1.0 } else { 0.0 }).collect();
    warp_trilinear(&Volume::new(d, lattice)?, field)
}

fn slice<T: Copy>(d: Dims3, data: &[T], z: usize) -> impl Fn(usize, usize) -> T + '_ {
    move |x, y| data[d.index(x, y, z)]
}

fn panel(d: Dims3, color: impl Fn(usize, usize) -> [u8; 3]) -> RgbImage {
    // Rows run top to bottom with y increasing downward.
    RgbImage::from_fn(d.nx as u32 * UPSCALE, d.ny as u32 * UPSCALE, |px, py| {
        Rgb(color((px / UPSCALE) as usize, (py / UPSCALE) as usize))
    })
}

fn gray(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Blue for negative, red for positive, white at zero.
fn diverging(v: f64) -> [u8; 3] {
    let a = v.clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - a.abs())).round() as u8;
    if a >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] }
}

fn label_color(l: u32) -> [u8; 3] {
    if l == 0 {
        return [0, 0, 0];
    }
    // Golden-angle hue walk keeps neighbouring labels distinct.
    let h = (l as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.65, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Write the four panels of one method on one pair (middle axial slice) and
/// a JSON sidecar with the annotations. `field` must be full resolution.
pub fn render_figures(dir: &Path, method: &str, pair: &PairSample, field: &DisplacementField) -> Result<FigureAnnotations> {
    let d = pair.target.dims();
    if field.level() != 0 || field.dims() != d {
        return Err(Error::shape(format!(
            "figures need a full-resolution field on {d}, got level {} on {}",
            field.level(),
            field.dims()
        )));
    }
    let z = d.nz / 2;
    let stem = format!("{}_{}", sanitize(method), sanitize(&format!("{}__{}", pair.target_id, pair.source_id)));
    let path = |kind: &str| dir.join(format!("{stem}_{kind}.png"));
    let mut panels = Vec::new();

    let moved = warp_trilinear(&pair.source, field)?;
    let img = slice(d, moved.data(), z);
    save(&panel(d, |x, y| gray(img(x, y))), &path("moved_image"))?;
    panels.push(path("moved_image"));

    let err = error_map(&pair.target, &moved)?;
    let e = slice(d, &err, z);
    save(&panel(d, |x, y| diverging(e(x, y))), &path("error_map"))?;
    panels.push(path("error_map"));

    let grid = grid_image(field)?;
    let g = slice(d, grid.data(), z);
    save(&panel(d, |x, y| gray(1.0 - g(x, y))), &path("warped_grid"))?;
    panels.push(path("warped_grid"));

    let (dsc, mask) = match (&pair.target_labels, &pair.source_labels) {
        (Some(t), Some(s)) => {
            let moved_labels: LabelMap = warp_nearest(s, field)?;
            let l = slice(d, moved_labels.data(), z);
            save(&panel(d, |x, y| label_color(l(x, y))), &path("moved_labels"))?;
            panels.push(path("moved_labels"));
            (Some(dice_score(t, &moved_labels)?), brain_mask(t))
        }
        _ => {
            log::warn!("pair has no label maps; skipping the label panel");
            (None, vec![true; d.len()])
        }
    };
    let ann = FigureAnnotations {
        method: method.to_string(),
        pair_id: format!("{}|{}", pair.target_id, pair.source_id),
        slice_z: z,
        dsc,
        mean_disp: mean_disp(field, &mask)?,
        ndv_pct: ndv_pct(field, &mask, NdvMode::Simplex)?,
        panels,
    };
    write_file(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&ann)?)?;
    Ok(ann)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
