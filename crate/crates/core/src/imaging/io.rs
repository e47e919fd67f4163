use std::io::ErrorKind;
use std::path::Path;

use image::{DynamicImage, ImageError as Codec, ImageReader};

use super::{ImageError, ImageF32, ImageU8};

fn classify(path: &Path, err: Codec) -> ImageError {
    let path = path.to_path_buf();
    match err {
        Codec::IoError(e) if e.kind() == ErrorKind::UnexpectedEof => {
            ImageError::Truncated { path, detail: e.to_string() }
        }
        Codec::IoError(source) => ImageError::Unreadable { path, source },
        other => {
            let detail = other.to_string();
            let lower = detail.to_lowercase();
            if lower.contains("eof") || lower.contains("end of") || lower.contains("truncat") {
                ImageError::Truncated { path, detail }
            } else {
                ImageError::Format { path, detail }
            }
        }
    }
}

/// Loads an 8-bit image as planar RGB in `[0,1]`.
///
/// Gray is replicated to three channels and alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageF32, ImageError> {
    let reader = ImageReader::open(path)
        .map_err(|source| ImageError::Unreadable { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| ImageError::Unreadable { path: path.to_path_buf(), source })?;
    let decoded = reader.decode().map_err(|e| classify(path, e))?;
    let rgb = match decoded {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(ImageError::UnsupportedBitDepth {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(ImageU8::new(w, h, 3, rgb.into_raw())?.to_f32())
}

/// Writes an 8-bit RGB (or gray for one channel) PNG.
pub fn save_image(path: &Path, img: &ImageF32) -> Result<(), ImageError> {
    let u8img = img.to_u8();
    let color = match u8img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(ImageError::Write {
                path: path.to_path_buf(),
                detail: format!("cannot encode {c} channels"),
            })
        }
    };
    image::save_buffer_with_format(
        path,
        &u8img.pixels,
        u8img.width as u32,
        u8img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImageError::Write { path: path.to_path_buf(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| ((i * 13) % 256) as f32 / 255.0).collect();
        let img = ImageF32::new(3, 5, 4, data).unwrap();
        save_image(&path, &img).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn gray_and_alpha_become_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        image::GrayImage::from_raw(2, 1, vec![10, 200]).unwrap().save(&gray).unwrap();
        let g = load_image(&gray).unwrap();
        assert_eq!(g.shape(), (3, 1, 2));
        assert_eq!(g.at(2, 0, 1), 200.0 / 255.0);

        let rgba = dir.path().join("a.png");
        image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4]).unwrap().save(&rgba).unwrap();
        assert_eq!(load_image(&rgba).unwrap().to_u8().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_sixteen_bit_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("d.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(1, 1, vec![5])
            .unwrap()
            .save(&p16)
            .unwrap();
        assert!(matches!(load_image(&p16), Err(ImageError::UnsupportedBitDepth { .. })));

        let junk = dir.path().join("j.png");
        std::fs::write(&junk, b"not an image at all").unwrap();
        assert!(matches!(load_image(&junk), Err(ImageError::Format { .. })));

        let missing = dir.path().join("none.png");
        assert!(matches!(load_image(&missing), Err(ImageError::Unreadable { .. })));
    }

    #[test]
    fn truncated_png_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ImageF32::filled(3, 32, 32, 0.25);
        save_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(matches!(err, ImageError::Truncated { .. } | ImageError::Format { .. }), "{err}");
    }
}
