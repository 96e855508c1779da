use proptest::prelude::*;
use samsr_core::io::{load_image, load_mask_dir, save_image, save_mask_dir, MANIFEST};
use samsr_core::tensorfile::{load_tensor, save_tensor};
use samsr_core::{ImageTensor, MaskStack};

#[test]
fn independent_decoder_sees_rounded_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.png");
    // 128/255 must survive exactly; 0.3 rounds to 77; 0.5 rounds to 128.
    let img = ImageTensor::from_fn(3, 2, 3, |c, y, x| match (c, y, x) {
        (0, 0, 0) => 128.0 / 255.0,
        (1, 0, 0) => 0.3,
        (2, 0, 0) => 0.5,
        _ => (c + y + x) as f64 / 10.0,
    })
    .unwrap();
    save_image(&img, &path, false).unwrap();

    let decoded = image::open(&path).unwrap().to_rgb8();
    assert_eq!(decoded.dimensions(), (3, 2));
    assert_eq!(decoded.get_pixel(0, 0).0, [128, 77, 128]);
    for y in 0..2 {
        for x in 0..3 {
            for c in 0..3 {
                let want = ((c + y + x) as f64 / 10.0 * 255.0).round() as u8;
                if (y, x) != (0, 0) {
                    assert_eq!(decoded.get_pixel(x as u32, y as u32).0[c], want);
                }
            }
        }
    }

    let back = load_image(&path).unwrap();
    assert_eq!(back.at(0, 0, 0), 128.0 / 255.0);
}

#[test]
fn reads_images_written_by_another_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gray.png");
    let buf = image::GrayImage::from_fn(4, 2, |x, y| image::Luma([(x * 60 + y) as u8]));
    buf.save(&path).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.channels(), img.height(), img.width()), (1, 2, 4));
    for y in 0..2 {
        for x in 0..4 {
            assert_eq!(img.at(0, y, x), f64::from((x * 60 + y) as u8) / 255.0);
        }
    }
}

#[test]
fn unsupported_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgba.png");
    image::RgbaImage::new(2, 2).save(&path).unwrap();
    let err = load_image(&path).unwrap_err();
    assert!(err.is_io());
}

#[test]
fn out_of_range_requires_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.png");
    let img = ImageTensor::from_fn(1, 2, 2, |_, y, x| (y + x) as f64 - 0.5).unwrap();
    assert!(save_image(&img, &path, false).is_err());
    assert!(!path.exists());
    save_image(&img, &path, true).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 128.0 / 255.0, 1.0]);
}

#[test]
fn mask_directory_round_trip_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let stack = MaskStack::from_bool_masks(
        3,
        2,
        &[
            vec![true, false, false, true, false, false],
            vec![false, true, true, false, true, true],
            vec![true, true, true, true, true, true],
        ],
    )
    .unwrap();
    save_mask_dir(&stack, dir.path()).unwrap();
    let loaded = load_mask_dir(dir.path()).unwrap().unwrap();
    assert_eq!(loaded, stack);

    // The manifest defines the order.
    std::fs::write(dir.path().join(MANIFEST), "mask_002.png\nmask_000.png\n").unwrap();
    let reordered = load_mask_dir(dir.path()).unwrap().unwrap();
    assert_eq!(reordered, stack.permuted(&[2, 0]).unwrap());

    // Without a manifest, files are taken in name order.
    std::fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(load_mask_dir(dir.path()).unwrap().unwrap(), stack);
}

#[test]
fn empty_mask_directory_has_no_masks() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_mask_dir(dir.path()).unwrap().is_none());
    assert!(load_mask_dir(dir.path().join("missing")).unwrap_err().is_io());
}

#[test]
fn mismatched_mask_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    image::GrayImage::new(2, 2)
        .save(dir.path().join("mask_000.png"))
        .unwrap();
    image::GrayImage::new(3, 2)
        .save(dir.path().join("mask_001.png"))
        .unwrap();
    assert!(load_mask_dir(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn png_round_trip_within_half_step(
        (c, h, w, data) in (prop::sample::select(vec![1usize, 3]), 1usize..6, 1usize..6)
            .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(0.0f64..=1.0, c * h * w)))
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageTensor::new(c, h, w, data).unwrap();
        save_image(&img, &path, false).unwrap();
        let back = load_image(&path).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn tensor_file_is_lossless(
        data in prop::collection::vec(-1e6f64..1e6, 3 * 3 * 4)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.smt");
        let img = ImageTensor::new(3, 3, 4, data).unwrap();
        save_tensor(&img, &path).unwrap();
        prop_assert_eq!(load_tensor(&path).unwrap(), img);
    }
}
