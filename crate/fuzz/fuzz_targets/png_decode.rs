#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::RasterImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RasterImage::from_png_bytes(data) {
        let png = img.to_png_bytes().expect("decoded image must encode");
        assert_eq!(RasterImage::from_png_bytes(&png).expect("round trip"), img);
    }
});
