//! Writes the procedural sample inputs under `samples/`:
//! a 128×128 textured target, a 64×64 shaded-ball source and its mask.
//!
//!     cargo run -p blend-core --example make_samples [OUT_DIR]

use std::path::PathBuf;

use blend_core::imageio::save_image;
use blend_core::rng::UniformStream;
use blend_core::{ImageTensor, Mask};

fn main() -> blend_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "samples".into()));
    std::fs::create_dir_all(&dir).expect("create output directory");

    let mut rng = UniformStream::new(2024);
    let grain: Vec<f64> = (0..128 * 128).map(|_| rng.next_in(-0.04, 0.04)).collect();
    let base = [[0.55, 0.70, 0.90], [0.35, 0.55, 0.25]];
    let target = ImageTensor::from_fn(128, 128, 3, |c, y, x| {
        let t = y as f64 / 127.0;
        let horizon = 70.0 + 6.0 * (x as f64 * 0.08).sin();
        let v = if (y as f64) < horizon {
            base[0][c] * (1.0 - 0.3 * t)
        } else {
            base[1][c] + 0.05 * ((x as f64 * 0.5).sin() * (y as f64 * 0.3).cos())
        };
        (v + grain[y * 128 + x]).clamp(0.0, 1.0)
    });

    let colour = [0.85, 0.30, 0.20];
    let source = ImageTensor::from_fn(64, 64, 3, |c, y, x| {
        let (dy, dx) = ((y as f64 - 31.5) / 24.0, (x as f64 - 31.5) / 24.0);
        let r2 = dx * dx + dy * dy;
        if r2 < 1.0 {
            let shade = 0.35 + 0.65 * (1.0 - r2).sqrt() * (1.0 - 0.4 * (dx + dy).max(0.0));
            (colour[c] * shade + 0.15 * (1.0 - r2).powi(4)).clamp(0.0, 1.0)
        } else {
            [0.9, 0.9, 0.85][c]
        }
    });
    let mask = Mask::from_fn(64, 64, |y, x| {
        let (dy, dx) = ((y as f64 - 31.5) / 28.0, (x as f64 - 31.5) / 28.0);
        dx * dx + dy * dy < 1.0
    });

    save_image(&target, dir.join("target.ppm"))?;
    save_image(&source, dir.join("source.ppm"))?;
    save_image(&mask.to_image(), dir.join("mask.ppm"))?;
    println!("wrote samples to {}", dir.display());
    Ok(())
}
