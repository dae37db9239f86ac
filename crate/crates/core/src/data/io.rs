//! PNG + manifest dataset I/O.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::ImageSample;
use crate::error::{Error, Result};

/// Write `samples` under `root` (images/, masks/, manifest.tsv).
///
/// Images are stored as 8-bit PNG (`round(v * 255)`), masks as 8-bit PNG
/// with values {0, 255}. Loading back reproduces masks exactly and images
/// within 1/255 quantization.
pub fn save_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut manifest = String::from("id\tlabeled\n");
    for sample in samples {
        sample.validate()?;
        let img_path = images_dir.join(format!("{}.png", sample.id));
        encode_image(&sample.image)
            .save(&img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?;
        if let Some(mask) = &sample.mask {
            let mask_path = masks_dir.join(format!("{}.png", sample.id));
            encode_mask(mask).save(&mask_path).map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?;
        }
        manifest.push_str(&format!(
            "{}\t{}\n",
            sample.id,
            if sample.labeled() { 1 } else { 0 }
        ));
    }
    let manifest_path = root.join("manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Load a dataset directory written by [`save_dataset`].
///
/// A manifest row with `labeled = 1` requires the mask file to exist; rows
/// with `labeled = 0` are loaded without a mask. Mask/image shape mismatch
/// is a format error.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    let manifest_path = root.join("manifest.tsv");
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let mut samples = Vec::new();
    for (line_no, line) in manifest.lines().enumerate() {
        if line_no == 0 {
            if line != "id\tlabeled" {
                return Err(Error::format(
                    &manifest_path,
                    format!("expected header 'id\\tlabeled', got '{line}'"),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (id, labeled) = match (cols.next(), cols.next()) {
            (Some(id), Some(flag)) => {
                let labeled = match flag {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::format(
                            &manifest_path,
                            format!("line {}: labeled flag must be 0|1, got '{other}'", line_no + 1),
                        ))
                    }
                };
                (id.to_string(), labeled)
            }
            _ => {
                return Err(Error::format(
                    &manifest_path,
                    format!("line {}: expected 'id\\tlabeled'", line_no + 1),
                ))
            }
        };

        let img_path = root.join("images").join(format!("{id}.png"));
        let image = decode_image(&img_path)?;
        let mask = if labeled {
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::format(
                    &mask_path,
                    "sample listed as labeled but mask file is missing",
                ));
            }
            let mask = decode_mask(&mask_path)?;
            if mask.shape() != [image.shape()[1], image.shape()[2]] {
                return Err(Error::format(
                    &mask_path,
                    format!(
                        "mask shape {:?} does not match image spatial shape {:?}",
                        mask.shape(),
                        &image.shape()[1..]
                    ),
                ));
            }
            Some(mask)
        } else {
            None
        };
        samples.push(ImageSample { id, image, mask });
    }
    Ok(samples)
}

fn encode_image(image: &Array3<f32>) -> DynamicImage {
    let (c, h, w) = image.dim();
    let quant = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    if c == 3 {
        let mut out = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        quant(image[[0, y, x]]),
                        quant(image[[1, y, x]]),
                        quant(image[[2, y, x]]),
                    ]),
                );
            }
        }
        DynamicImage::ImageRgb8(out)
    } else {
        let mut out = GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(x as u32, y as u32, image::Luma([quant(image[[0, y, x]])]));
            }
        }
        DynamicImage::ImageLuma8(out)
    }
}

fn decode_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let arr = match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut arr = Array3::<f32>::zeros((1, h, w));
            for (x, y, p) in gray.enumerate_pixels() {
                arr[[0, y as usize, x as usize]] = p.0[0] as f32 / 255.0;
            }
            arr
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut arr = Array3::<f32>::zeros((3, h, w));
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    arr[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
                }
            }
            arr
        }
    };
    Ok(arr)
}

fn encode_mask(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] != 0 { 255 } else { 0 }]),
            );
        }
    }
    out
}

fn decode_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Array2::<u8>::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = u8::from(p.0[0] > 127);
    }
    Ok(mask)
}
