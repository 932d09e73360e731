use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use cascade_core::volume::{LabelVolume, Volume3D};

/// Projects along z: gray maximum intensity, mask voxels tinted red.
pub fn write_mip_overlay(img: &Volume3D, mask: &LabelVolume, path: &Path) -> Result<()> {
    img.ensure_same_dims(mask, "overlay image vs mask")?;
    let [nx, ny, nz] = img.dims();
    let mut mip = vec![f32::NEG_INFINITY; nx * ny];
    let mut hit = vec![false; nx * ny];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let k = x + nx * y;
                mip[k] = mip[k].max(img.get(x, y, z));
                hit[k] |= mask.get(x, y, z) != 0;
            }
        }
    }
    let (lo, hi) = mip
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let k = x + nx * y;
            let g = ((mip[k] - lo) * scale).round().clamp(0.0, 255.0) as u8;
            let px = if hit[k] {
                Rgb([255, g / 2, g / 2])
            } else {
                Rgb([g, g, g])
            };
            // image rows run top-down; flip so +y points up
            out.put_pixel(x as u32, (ny - 1 - y) as u32, px);
        }
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}
