use warpode::gif::encode_gif;
use warpode::warp::ImageFrame;

fn main() {
    // gray animation with varied content (exercises LZW dict growth)
    let frames: Vec<ImageFrame> = (0..5)
        .map(|t| {
            ImageFrame::from_fn(48, 64, 1, |i, j, _| {
                (((i * 3 + j * 5 + t * 17) % 256) as f64) / 255.0
            })
        })
        .collect();
    encode_gif(&frames, 20, "/tmp/gifcheck/gray.gif").unwrap();

    // rgb
    let frames: Vec<ImageFrame> = (0..3)
        .map(|t| {
            ImageFrame::from_fn(16, 16, 3, |i, j, ch| {
                (((i * 5 + j * 9 + ch * 31 + t * 40) % 256) as f64) / 255.0
            })
        })
        .collect();
    encode_gif(&frames, 10, "/tmp/gifcheck/rgb.gif").unwrap();

    // big noisy frame to force dictionary resets (>4096 codes)
    let mut state = 12345u64;
    let mut rand = move || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((state >> 33) % 256) as f64 / 255.0 };
    let noisy = ImageFrame::from_fn(128, 128, 1, |_, _, _| rand());
    encode_gif(&[noisy], 1, "/tmp/gifcheck/noise.gif").unwrap();
    println!("wrote gifs");
}
