use fmbench::features::*;
use fmbench::imgio::{to_grayscale, GrayFrame};
use fmbench::matchgeom::{hamming, match_descriptors};
use fmbench::synthgen::gen_texture;
use proptest::prelude::*;

fn texture(seed: u64, w: usize, h: usize) -> GrayFrame {
    to_grayscale(&gen_texture(seed, w, h).unwrap())
}

/// `img` rotated by `theta` about `(cx, cy)`, bilinear: content at offset `p`
/// from the center moves to `R(theta) p`.
fn rotate(img: &GrayFrame, theta: f64, cx: f64, cy: f64) -> GrayFrame {
    let (s, c) = theta.sin_cos();
    GrayFrame::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let (sx, sy) = (c * dx + s * dy + cx, -s * dx + c * dy + cy);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (a, b) = (sx - x0, sy - y0);
        let px = |x: f64, y: f64| img.get_clamped(x as isize, y as isize) as f64;
        let top = px(x0, y0) * (1.0 - a) + px(x0 + 1.0, y0) * a;
        let bot = px(x0, y0 + 1.0) * (1.0 - a) + px(x0 + 1.0, y0 + 1.0) * a;
        (top * (1.0 - b) + bot * b).round() as u8
    })
}

// Measured on this fixture: compensated distances span 0..=15 (median 7);
// describing with the wrong rotation gives a median of 112.
const ROTATED_MAX_HAMMING: u32 = 64;

#[test]
fn rotated_patch_keeps_descriptor_when_angle_supplied() {
    let img = texture(11, 256, 256);
    let theta = std::f64::consts::PI / 6.0;
    let mut wrong = Vec::new();
    for i in 0..15 {
        for j in 0..15 {
            let (cx, cy) = (40 + i * 12, 40 + j * 12);
            let rot = rotate(&img, theta, cx as f64, cy as f64);
            let at = |angle: f64| Keypoint {
                angle: angle as f32,
                ..Keypoint::at(cx as f32, cy as f32)
            };
            let a = describe(&img, &at(0.0));
            let b = describe(&rot, &at(theta));
            assert!(hamming(&a, &b) <= ROTATED_MAX_HAMMING, "({cx},{cy}): {}", hamming(&a, &b));
            wrong.push(hamming(&a, &describe(&rot, &at(0.0))));
        }
    }
    wrong.sort();
    assert!(wrong[wrong.len() / 2] > ROTATED_MAX_HAMMING);
}

#[test]
fn default_texture_is_feature_rich() {
    let img = texture(12, 512, 512);
    let set = detect_and_describe(&img, &DetectorParams::default()).unwrap();
    // frozen: the texture saturates the cap
    assert_eq!(set.len(), 1000);
    assert!(set.len() >= 500);
}

#[test]
fn integer_shift_moves_matched_keypoints() {
    let img = texture(12, 512, 512);
    let p = DetectorParams::default();
    for (dx, dy) in [(7usize, 4usize), (13, 0), (1, 1)] {
        let (w, h) = (400 - dx, 300 - dy);
        let a = GrayFrame::from_fn(w, h, |x, y| img.get(x + dx, y + dy));
        let b = GrayFrame::from_fn(w, h, |x, y| img.get(x, y));
        let fa = detect_and_describe(&a, &p).unwrap();
        let fb = detect_and_describe(&b, &p).unwrap();
        let m = match_descriptors(&fa, &fb);
        let ok = m
            .iter()
            .filter(|m| {
                let (ka, kb) = (fa.keypoints[m.index_a], fb.keypoints[m.index_b]);
                (ka.x + dx as f32 - kb.x).abs() <= 1.0 && (ka.y + dy as f32 - kb.y).abs() <= 1.0
            })
            .count();
        assert!(m.len() > 100);
        assert!(ok as f64 >= 0.8 * m.len() as f64, "shift ({dx},{dy}): {ok}/{}", m.len());
    }
}

#[test]
fn keypoints_lie_inside_the_frame() {
    let img = texture(3, 320, 240);
    let p = DetectorParams::default();
    let set = detect_and_describe(&img, &p).unwrap();
    assert_eq!(set.keypoints.len(), set.descriptors.len());
    for k in &set.keypoints {
        assert!(k.x >= 0.0 && k.x < 320.0 && k.y >= 0.0 && k.y < 240.0);
        assert!((k.level as usize) < p.n_levels);
        assert!((0.0..std::f32::consts::TAU).contains(&k.angle));
    }
}

#[test]
fn cache_file_round_trips_real_features() {
    let dir = tempfile::tempdir().unwrap();
    let set = detect_and_describe(&texture(5, 200, 160), &DetectorParams::default()).unwrap();
    let path = dir.path().join("f.fbfs");
    write_feature_cache(&path, &set).unwrap();
    assert_eq!(read_feature_cache(&path, set.frame_index).unwrap(), set);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FBFS");
    assert_eq!(bytes.len(), 9 + 49 * set.len());
}

#[cfg(feature = "parallel")]
#[test]
fn extraction_ignores_thread_count() {
    let frames: Vec<GrayFrame> = (0..6).map(|s| texture(s, 160, 128)).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                fmbench::par::map(&frames, |f| detect_and_describe(f, &DetectorParams::default()).unwrap())
            })
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cap_is_respected(seed in any::<u64>(), cap in 8usize..300, levels in 1usize..5) {
        let img = texture(seed, 192, 160);
        let p = DetectorParams { max_features: cap, n_levels: levels, ..DetectorParams::default() };
        let set = detect_and_describe(&img, &p).unwrap();
        prop_assert!(set.len() <= cap);
        prop_assert_eq!(set.keypoints.len(), set.descriptors.len());
    }

    #[test]
    fn descriptor_self_distance_is_zero(seed in any::<u64>(), x in 20f32..140.0, y in 20f32..100.0, angle in 0f32..std::f32::consts::TAU) {
        let img = texture(seed, 160, 128);
        let kp = Keypoint { angle, ..Keypoint::at(x, y) };
        prop_assert_eq!(hamming(&describe(&img, &kp), &describe(&img, &kp)), 0);
    }
}
