//! Preprocessing a raw, mirrored and inverted synthetic mammogram: polarity
//! and side are fixed, the image is padded square, and the breast mask is
//! segmented. Writes PNGs into the directory given as the first argument.

use std::path::PathBuf;

use mambo::io::{write_image, write_mask, BitDepth};
use mambo::preprocess::{breast_mask_stages, preprocess};
use mambo::synth::raw_mammogram;

fn main() -> mambo::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mambo-preprocess"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| mambo::Error::io(&out, e))?;

    let raw = raw_mammogram(300, 220, 7, true, true);
    let (img, mask) = preprocess(&raw, 32)?;
    println!("inverted: {}, flipped: {}, padding: {:?}", img.was_inverted, img.was_flipped, img.pad);
    println!("mask area {} px, bbox {:?}", mask.area_px, mask.bbox);

    let (lo, hi) = raw.min_max().expect("non-empty");
    write_image(out.join("raw.png"), &raw.map(|v| (v - lo) / (hi - lo)), BitDepth::Sixteen)?;
    write_image(out.join("oriented.png"), &img.plane, BitDepth::Sixteen)?;
    let stages = breast_mask_stages(&img.plane);
    write_mask(out.join("binarized.png"), &stages.binarized)?;
    write_mask(out.join("largest.png"), &stages.largest)?;
    write_mask(out.join("mask.png"), &mask.mask)?;
    println!("wrote {}", out.display());
    Ok(())
}
