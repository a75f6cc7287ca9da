mod common;

use std::sync::Arc;

use dtv_core::backends::adapter::{BlobEncoding, Frame, GenerateRequest, Header};
use dtv_core::backends::mock::{IdentityCodec, MockConfig, MockGenerator};
use dtv_core::backends::{GenerateInput, Latent};
use dtv_core::engine::{PromptSchedule, StepPrompt};
use dtv_core::forge::align_pair;
use dtv_core::gbuffer::synthetic;
use dtv_core::mask::MaskMode;
use dtv_core::metrics::{kid, psnr, q_score, ssim, KidOptions, SsimParams};
use dtv_core::{
    apply_channel_dropout, assemble_condition, refine_mask, semantic_intensity, BufferKind,
    DropoutSpec, Engine, EngineConfig, Image, MaskParams,
};
use proptest::prelude::*;

fn image(w: usize, h: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, w * h * c)
        .prop_map(move |d| Image::from_vec(w, h, c, d).unwrap())
}

fn sized_image(c: usize, max: usize) -> impl Strategy<Value = Image> {
    (1..=max, 1..=max).prop_flat_map(move |(w, h)| image(w, h, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refined_mask_is_bounded_and_covers_support(
        raw in sized_image(1, 20),
        tau in 0.05f64..0.95,
        r in 0usize..4,
        sigma in 0.0f64..2.5,
    ) {
        let m = refine_mask(&raw, tau, r, sigma);
        prop_assert!(m.refined.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if sigma == 0.0 {
            for (a, b) in raw.data().iter().zip(m.refined.data()) {
                if *a > tau {
                    prop_assert_eq!(*b, 1.0);
                }
            }
        }
    }

    #[test]
    fn refined_mask_grows_with_radius(raw in sized_image(1, 16), tau in 0.1f64..0.9, sigma in 0.0f64..2.0) {
        let mut prev = refine_mask(&raw, tau, 0, sigma).refined;
        for r in 1..4 {
            let next = refine_mask(&raw, tau, r, sigma).refined;
            for (a, b) in prev.data().iter().zip(next.data()) {
                prop_assert!(b + 1e-12 >= *a);
            }
            prev = next;
        }
    }

    #[test]
    fn dropped_buffers_have_zero_spans(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let g = synthetic::scene("p", 12, 10, 4);
        let (dropped, kept) = apply_channel_dropout(&g, &DropoutSpec::uniform(p, seed));
        let c = assemble_condition(&dropped, None).unwrap();
        prop_assert_eq!(c.data().channels(), 21);
        for kind in BufferKind::ALL {
            let span = c.span(kind);
            if kept[kind.index()] {
                prop_assert!(span.max_abs() > 0.0 || g.buffer(kind).max_abs() == 0.0);
            } else {
                prop_assert_eq!(span.max_abs(), 0.0);
            }
        }
        prop_assert_eq!(c.mask_span().max_abs(), 0.0);
    }

    #[test]
    fn intensity_is_nonnegative_and_scale_free(a in image(8, 6, 3), b in image(8, 6, 3), k in 0.1f64..10.0) {
        let m = Image::from_fn(8, 6, 1, |x, y, _| ((x * y) % 3) as f64 / 2.0 + 0.1);
        let i = semantic_intensity(&a, &b, &m, true).unwrap();
        let scaled = semantic_intensity(&a, &b, &m.map(|v| v * k), true).unwrap();
        prop_assert!(i >= 0.0);
        prop_assert!((i - scaled).abs() <= 1e-12 * i.max(1.0));
        prop_assert_eq!(semantic_intensity(&a, &a, &m, true).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_identity_holds(lambda in 0.05f64..1.0, seed in 0u64..1000, steps in 1usize..5) {
        let g = synthetic::scene("r", 10, 10, seed);
        let target = common::textured(10, 10, seed);
        let codec = Arc::new(IdentityCodec);
        let backend = MockGenerator::new(
            MockConfig { target_image: target, contraction: lambda, respect_mask: true },
            codec.clone(),
        ).unwrap();
        let config = EngineConfig {
            tau_stop: 0.0,
            max_steps: steps,
            mask: MaskParams { mode: MaskMode::User, threshold: 0.5, dilation_radius: 0, sigma: 0.0 },
            ..EngineConfig::default()
        };
        let full = Image::filled(10, 10, 1, 1.0);
        let engine = Engine::new(&backend, codec.as_ref(), config).unwrap();
        let mut prompts = PromptSchedule::new(vec![StepPrompt { prompt: None, user_mask: Some(full) }; steps]);
        let t = engine.run(&g, seed, &mut prompts).unwrap();
        prop_assert_eq!(t.states.len(), t.dtvs.len() + 1);
        for (i, d) in t.dtvs.iter().enumerate() {
            let rebuilt = t.states[i].image.add(&d.delta).unwrap().clamp01();
            prop_assert_eq!(&rebuilt, &t.states[i + 1].image);
        }
    }

    #[test]
    fn metric_symmetries(a in image(12, 12, 3), b in image(12, 12, 3)) {
        let p = SsimParams::default();
        prop_assert!((psnr(&a, &b, 1.0).unwrap() - psnr(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b, &p).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn q_score_lies_between_its_inputs(a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let q = q_score(a, b).unwrap();
        prop_assert!(q >= a.min(b) - 1e-12 && q <= a.max(b) + 1e-12);
    }

    #[test]
    fn kid_vanishes_on_identical_sets(v in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 3..10)) {
        prop_assert_eq!(kid(&v, &v, &KidOptions::default()).unwrap().mean, 0.0);
    }

    #[test]
    fn alignment_recovers_integer_shifts(dx in -4i64..=4, dy in -4i64..=4, seed in 0u64..50) {
        let x = common::textured(32, 28, seed);
        let a = align_pair(&x, &x.translate(dx, dy), 4).unwrap();
        prop_assert_eq!(a.shift, (dx, dy));
    }

    #[test]
    fn generate_request_round_trips(step in 0usize..20, prompt in proptest::option::of("[a-z ]{0,24}"), seed in any::<u64>()) {
        let g = synthetic::scene("w", 9, 7, seed % 97);
        let c = assemble_condition(&g, None).unwrap();
        let latent = Latent(common::textured(9, 7, seed % 13));
        let mask = Image::from_fn(9, 7, 1, |x, y, _| ((x + y) % 2) as f64);
        let input = GenerateInput { latent: &latent, step, condition: &c, mask: Some(&mask), prompt: prompt.as_deref() };
        let bytes = GenerateRequest::from_input(&input).encode().unwrap();
        let back = GenerateRequest::decode(&bytes).unwrap();
        prop_assert_eq!(back, GenerateRequest::from_input(&input));
    }

    #[test]
    fn png_blobs_quantize_to_16_bits(img in image(5, 4, 3)) {
        let mut f = Frame::new(Header::default());
        f.push_image("x", &img, BlobEncoding::Png16).unwrap();
        let back = Frame::decode(&f.encode().unwrap()).unwrap().image("x").unwrap().unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
