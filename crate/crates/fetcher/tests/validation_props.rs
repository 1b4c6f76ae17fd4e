use crawlcurate_fetcher::fetch::validate_payload;
use crawlcurate_fetcher::fixture::{pad_jpeg, png_bomb, render_image};
use crawlcurate_fetcher::imageops::{fit_dimensions, resize_image};
use crawlcurate_fetcher::{FetchConfig, FetchStatus};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accepted_payloads_satisfy_every_rule(
        w in 1u32..200,
        h in 1u32..200,
        pad in 0usize..40_000,
        min_bytes in 1u64..20_000,
        extra in 1u64..60_000,
        max_pixels in 1u64..50_000,
        kind in 0u8..3,
    ) {
        let body = match kind {
            0 => { let j = render_image(w, h, [90, 30, 200], 1); pad_jpeg(&j, j.len() + pad) }
            1 => png_bomb(w * 1000, h * 1000, 6000 + pad),
            _ => vec![0x42; pad],
        };
        let config = FetchConfig { min_image_bytes: min_bytes, max_image_bytes: min_bytes + extra, max_pixels, ..FetchConfig::default() };
        let r = validate_payload(&body, &config, None);
        if r.status == FetchStatus::Accepted {
            prop_assert!(r.width > 0 && r.height > 0);
            prop_assert!(r.image_bytes_len >= config.min_image_bytes);
            prop_assert!(r.image_bytes_len <= config.max_image_bytes);
            prop_assert!(u64::from(r.width) * u64::from(r.height) <= config.max_pixels);
            prop_assert_eq!(kind, 0);
        }
    }

    #[test]
    fn fit_preserves_aspect_and_bound(w in 1u32..5000, h in 1u32..5000, target in 1u32..2000) {
        let (nw, nh) = fit_dimensions(w, h, target);
        prop_assert!(nw.max(nh) <= target.max(w.max(h).min(target)));
        prop_assert!(nw <= w && nh <= h);
        if w.max(h) <= target {
            prop_assert_eq!((nw, nh), (w, h));
        } else {
            // within one pixel of the exact ratio
            let exact = f64::from(w) / f64::from(h);
            let lo = (f64::from(nw) - 0.5).max(0.5) / (f64::from(nh) + 0.5);
            let hi = (f64::from(nw) + 0.5) / (f64::from(nh) - 0.5).max(0.5);
            prop_assert!(lo <= exact && exact <= hi, "{w}x{h} -> {nw}x{nh}");
        }
    }
}

#[test]
fn resize_never_upscales() {
    for (w, h) in [(10, 10), (256, 100), (100, 256)] {
        let img = render_image(w, h, [1, 2, 3], 0);
        let r = resize_image(&img, 256).unwrap();
        assert_eq!((r.width, r.height, r.changed), (w, h, false));
    }
}
