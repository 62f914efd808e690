#![no_main]
use libfuzzer_sys::fuzz_target;
use qface::pgm::GrayImage;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = GrayImage::decode(data) {
        assert_eq!(img.pixels.len(), img.width * img.height);
        assert_eq!(GrayImage::decode(&img.encode()).expect("encoded image decodes"), img);
    }
});
