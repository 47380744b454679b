use std::path::Path;

use image::{DynamicImage, ImageBuffer, Pixel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HarnessError;

/// Decodes a PNG, JPEG or TIFF raster.
pub fn load_image(path: &Path) -> Result<DynamicImage, HarnessError> {
    let reader = image::ImageReader::open(path)
        .map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
    reader.decode().map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn brighten<P>(buf: &mut ImageBuffer<P, Vec<u8>>, color_channels: usize, normal: &Normal<f64>, rng: &mut ChaCha8Rng)
where
    P: Pixel<Subpixel = u8>,
{
    for px in buf.pixels_mut() {
        let g = normal.sample(rng).abs();
        for c in px.channels_mut().iter_mut().take(color_channels) {
            let v = (f64::from(*c) / 255.0 + g).min(1.0);
            *c = (v * 255.0).round() as u8;
        }
    }
}

/// Brightening half-normal noise: each pixel draws one `g ~ N(0, sigma)`
/// (on a [0, 1] intensity scale) and every color channel becomes
/// `min(v + |g|, 1)`. Alpha is untouched. Pixels are visited row-major from a
/// ChaCha8 stream seeded with `seed`, so output bytes depend only on
/// (image, sigma, seed). Output is 8 bits per channel.
pub fn inject_noise(image: &DynamicImage, sigma: f64, seed: u64) -> Result<DynamicImage, HarnessError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(HarnessError::Sigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| HarnessError::Sigma(sigma))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let has_alpha = image.color().has_alpha();
    let out = match (image.color().has_color(), has_alpha) {
        (false, false) => {
            let mut buf = image.to_luma8();
            brighten(&mut buf, 1, &normal, &mut rng);
            DynamicImage::ImageLuma8(buf)
        }
        (false, true) => {
            let mut buf = image.to_luma_alpha8();
            brighten(&mut buf, 1, &normal, &mut rng);
            DynamicImage::ImageLumaA8(buf)
        }
        (true, false) => {
            let mut buf = image.to_rgb8();
            brighten(&mut buf, 3, &normal, &mut rng);
            DynamicImage::ImageRgb8(buf)
        }
        (true, true) => {
            let mut buf = image.to_rgba8();
            brighten(&mut buf, 3, &normal, &mut rng);
            DynamicImage::ImageRgba8(buf)
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};

    #[test]
    fn zero_sigma_is_identity() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 40, y as u8 * 50, 7])));
        assert_eq!(inject_noise(&img, 0.0, 3).unwrap(), img);
    }

    #[test]
    fn white_stays_white() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(32, 32, Luma([255])));
        let out = inject_noise(&img, 0.7, 1).unwrap();
        assert!(out.to_luma8().pixels().all(|p| p.0[0] == 255));
    }

    #[test]
    fn only_brightens_and_is_seeded() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 5) as u8, (y * 7) as u8, 100])));
        let a = inject_noise(&img, 0.2, 42).unwrap();
        let b = inject_noise(&img, 0.2, 42).unwrap();
        let c = inject_noise(&img, 0.2, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (p, q) in img.to_rgb8().pixels().zip(a.to_rgb8().pixels()) {
            assert!(p.0.iter().zip(q.0.iter()).all(|(u, v)| v >= u));
        }
    }

    #[test]
    fn alpha_is_preserved() {
        let img = DynamicImage::ImageRgba8(RgbaImage::from_pixel(8, 8, Rgba([0, 0, 0, 77])));
        let out = inject_noise(&img, 0.3, 5).unwrap().to_rgba8();
        assert!(out.pixels().all(|p| p.0[3] == 77));
        assert!(out.pixels().any(|p| p.0[0] > 0));
    }

    #[test]
    fn one_draw_per_pixel_shared_by_channels() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(16, 16, Rgb([10, 10, 10])));
        let out = inject_noise(&img, 0.2, 8).unwrap().to_rgb8();
        assert!(out.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
    }

    #[test]
    fn bad_sigma_and_bad_file() {
        let img = DynamicImage::ImageLuma8(GrayImage::new(2, 2));
        assert!(matches!(inject_noise(&img, -0.1, 0), Err(HarnessError::Sigma(_))));
        assert!(matches!(inject_noise(&img, f64::NAN, 0), Err(HarnessError::Sigma(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p), Err(HarnessError::Format { .. })));
        assert!(matches!(load_image(&dir.path().join("none.png")), Err(HarnessError::Read { .. })));
    }
}
