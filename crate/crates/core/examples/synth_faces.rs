//! Renders a grid of procedural faces with their component boxes.
use dfdnet::features::component_rois;
use dfdnet::imaging::{resize_bicubic, Image};
use dfdnet::synth::synth_faces;

fn main() -> dfdnet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_grid.png".into());
    let res = 64;
    let faces = synth_faces(16, res, 1);
    let zoom = 3;
    let cell = res * zoom;
    let mut grid = Image::new(4 * cell, 4 * cell);
    for (i, f) in faces.iter().enumerate() {
        let mut big = resize_bicubic(&f.image, cell, cell);
        if let Some(lm) = &f.landmarks {
            for b in component_rois(lm, (res, res))? {
                let (x0, y0) = ((b.x0 * zoom as f64) as usize, (b.y0 * zoom as f64) as usize);
                let (x1, y1) = (((b.x1 * zoom as f64) as usize).min(cell - 1), ((b.y1 * zoom as f64) as usize).min(cell - 1));
                for x in x0..=x1 {
                    big.set(1, y0, x, 1.0);
                    big.set(1, y1, x, 1.0);
                }
                for y in y0..=y1 {
                    big.set(1, y, x0, 1.0);
                    big.set(1, y, x1, 1.0);
                }
            }
        }
        let (gy, gx) = ((i / 4) * cell, (i % 4) * cell);
        for c in 0..3 {
            for y in 0..cell {
                for x in 0..cell {
                    grid.set(c, gy + y, gx + x, big.get(c, y, x));
                }
            }
        }
    }
    grid.clip();
    grid.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
