#![allow(dead_code)]

use outpaint_core::canvas::{extract_unmasked, mask_for_training, Direction, MaskRatio, RasterImage};
use outpaint_core::caption::{Caption, CaptionKind};
use outpaint_core::diffusion::TrainExample;
use outpaint_core::model::OutpaintModel;

/// Smooth synthetic scene number `i`: a colour gradient plus a horizon band.
pub fn scene(i: usize, size: usize) -> RasterImage {
    let a = (i as f64 * 0.37).fract();
    let b = (i as f64 * 0.61 + 0.2).fract();
    let horizon = size / 3 + i % (size / 3).max(1);
    RasterImage::from_fn(size, size, |y, x| {
        let t = x as f64 / size as f64;
        if y < horizon {
            [0.3 + 0.5 * a * t, 0.5 + 0.3 * b, 0.9 - 0.2 * t]
        } else {
            [0.2 + 0.6 * b, 0.4 + 0.4 * a * (1.0 - t), 0.2]
        }
    })
    .unwrap()
}

pub fn caption(text: &str, kind: CaptionKind) -> Caption {
    Caption::new(text, kind).unwrap()
}

pub fn examples(model: &OutpaintModel, n: usize, size: usize) -> Vec<TrainExample> {
    (0..n)
        .map(|i| {
            let target = scene(i, size).quantized();
            let dir = Direction::ALL[i % 4];
            let masked = mask_for_training(&target, dir, MaskRatio::HALF).unwrap();
            let visible = extract_unmasked(&masked).unwrap();
            let g = caption(&format!("a wide landscape number {i}"), CaptionKind::Global);
            let l = caption(&format!("a field with colour {}", i % 5), CaptionKind::Annotated);
            TrainExample {
                id: format!("scene{i}-{}", dir.name()),
                global: model.encode_caption(&g).unwrap(),
                local: model.encode_caption(&l).unwrap(),
                visual: model.encode_image(&visible).unwrap(),
                masked,
                target,
            }
        })
        .collect()
}
