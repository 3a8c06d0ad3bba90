//! Property tests for the geometric, metric and serialization invariants.

use outpaint_core::canvas::{
    canvas_extent, extract_unmasked, mask_for_training, Canvas, Direction, MaskRatio, RasterImage, Rect,
};
use outpaint_core::checkpoint::{decode_archive, encode_archive};
use outpaint_core::conditioning::{
    build_condition, AblationFlags, ConditionMode, ConditionParams, EmbeddingSource, TokenEmbeddings,
};
use outpaint_core::eval::{cosine_score, inception_score, ClassProbabilities};
use outpaint_core::params::ParamStore;
use outpaint_core::tape::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn direction() -> impl Strategy<Value = Direction> {
    prop::sample::select(Direction::ALL.to_vec())
}

fn mode() -> impl Strategy<Value = ConditionMode> {
    prop::sample::select(vec![ConditionMode::Dual, ConditionMode::AllInMlp, ConditionMode::AllInXattn])
}

fn image(h: usize, w: usize, seed: u64) -> RasterImage {
    RasterImage::from_fn(h, w, |y, x| {
        let v = (y * 31 + x * 17) as u64 ^ seed;
        [
            (v % 251) as f64 / 250.0,
            (v.wrapping_mul(7) % 241) as f64 / 240.0,
            (v.wrapping_mul(13) % 239) as f64 / 238.0,
        ]
    })
    .unwrap()
}

/// Strip width by exhaustive search: closest to the target fraction, ties to the wider strip.
fn brute_strip(extent: usize, kept: u32, masked: u32) -> usize {
    let total = (kept + masked) as i64;
    (0..=extent)
        .min_by_key(|&s| {
            let err = (s as i64 * total - extent as i64 * masked as i64).abs();
            (err, std::cmp::Reverse(s))
        })
        .unwrap()
}

fn embeddings(l: usize, d: usize, source: EmbeddingSource, values: &[f64]) -> TokenEmbeddings {
    TokenEmbeddings::new(
        Matrix::from_shape_fn((l, d), |(i, j)| values[(i * d + j) % values.len()]),
        source,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strip_width_matches_exhaustive_search(extent in 1usize..600, kept in 1u32..9, masked in 1u32..9) {
        prop_assert_eq!(MaskRatio::new(kept, masked).unwrap().strip_width(extent), brute_strip(extent, kept, masked));
    }

    #[test]
    fn training_mask_covers_exactly_the_edge_strip(
        side in 2usize..40,
        kept in 1u32..5,
        masked in 1u32..5,
        dir in direction(),
        seed in any::<u64>(),
    ) {
        let ratio = MaskRatio::new(kept, masked).unwrap();
        let img = image(side, side, seed);
        let strip = ratio.strip_width(side);
        let result = mask_for_training(&img, dir, ratio);
        if strip == 0 || strip == side {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let m = result.unwrap();
        prop_assert_eq!(m.strip(), strip);
        for y in 0..side {
            for x in 0..side {
                let along = match dir {
                    Direction::Left => x,
                    Direction::Right => side - 1 - x,
                    Direction::Top => y,
                    Direction::Bottom => side - 1 - y,
                };
                let expect = u8::from(along < strip);
                prop_assert_eq!(m.mask()[y * side + x], expect);
                if expect == 0 {
                    prop_assert_eq!(m.image().pixel(y, x), img.pixel(y, x));
                }
            }
        }
        let kept_img = extract_unmasked(&m).unwrap();
        prop_assert_eq!(kept_img, img.crop(m.kept_rect()).unwrap());
    }

    #[test]
    fn compositing_never_rewrites_existing_pixels(
        base in 2usize..16,
        shift_frac in 0.0f64..1.0,
        plan in prop::collection::vec(direction(), 1..7),
        seed in any::<u64>(),
    ) {
        let shift = ((base as f64 * shift_frac) as usize).min(base - 1);
        let mut canvas = Canvas::new(image(base, base, seed), shift).unwrap();
        let (mut h, mut w) = (base, base);
        for (i, &d) in plan.iter().enumerate() {
            let gen = image(base, base, seed.wrapping_add(i as u64 + 1));
            let next = canvas.composite(&gen, d).unwrap();
            let (oy, ox) = match d {
                Direction::Left => (0, shift),
                Direction::Top => (shift, 0),
                Direction::Right | Direction::Bottom => (0, 0),
            };
            let old = next.image().crop(Rect::new(oy, ox, h, w)).unwrap();
            prop_assert_eq!(&old, canvas.image());
            match d {
                Direction::Left | Direction::Right => w += shift,
                Direction::Top | Direction::Bottom => h += shift,
            }
            prop_assert_eq!((next.image().height(), next.image().width()), (h, w));
            canvas = next;
        }
        let horizontal = plan.iter().filter(|d| matches!(d, Direction::Left | Direction::Right)).count();
        prop_assert_eq!(w, canvas_extent(base, shift, horizontal));
        let restored = Canvas::restore(canvas.image().clone(), base, shift, canvas.plan()).unwrap();
        prop_assert_eq!(restored, canvas);
    }

    #[test]
    fn step_input_keeps_the_outer_slice(
        base in 2usize..16,
        shift_frac in 0.0f64..1.0,
        dir in direction(),
        seed in any::<u64>(),
    ) {
        let shift = ((base as f64 * shift_frac) as usize).min(base - 1);
        let canvas = Canvas::new(image(base, base, seed), shift).unwrap();
        let input = canvas.build_step_input(dir).unwrap();
        prop_assert_eq!(input.strip(), shift);
        prop_assert_eq!(input.mask().iter().filter(|&&m| m == 1).count(), shift * base);
        let keep = base - shift;
        let src = match dir {
            Direction::Right => Rect::new(0, base - keep, base, keep),
            Direction::Left => Rect::new(0, 0, base, keep),
            Direction::Top => Rect::new(0, 0, keep, base),
            Direction::Bottom => Rect::new(base - keep, 0, keep, base),
        };
        prop_assert_eq!(
            extract_unmasked(&input).unwrap(),
            canvas.image().crop(src).unwrap()
        );
    }

    #[test]
    fn inception_score_is_bounded_and_block_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 4..30),
        splits in 1usize..4,
        rot in 0usize..100,
    ) {
        let probs: Vec<ClassProbabilities> = rows
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                ClassProbabilities::new(r.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let n = probs.len();
        let a = inception_score(&probs, splits, "").unwrap().value;
        prop_assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&a));

        let mut shuffled = Vec::with_capacity(n);
        for s in 0..splits {
            let mut block = probs[s * n / splits..(s + 1) * n / splits].to_vec();
            let k = rot % block.len();
            block.rotate_left(k);
            block.reverse();
            shuffled.extend(block);
        }
        let b = inception_score(&shuffled, splits, "").unwrap().value;
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn cosine_score_symmetries(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        b in prop::collection::vec(-10.0f64..10.0, 6),
        scale in 0.1f64..50.0,
    ) {
        let Some(s) = cosine_score(&a, &b) else { return Ok(()); };
        prop_assert!((-100.0 - 1e-9..=100.0 + 1e-9).contains(&s));
        prop_assert!((cosine_score(&b, &a).unwrap() - s).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((cosine_score(&neg, &b).unwrap() + s).abs() < 1e-9);
        let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
        prop_assert!((cosine_score(&scaled, &b).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn context_shape_follows_mode(
        l in 1usize..6,
        d in 1usize..8,
        m in mode(),
        values in prop::collection::vec(-2.0f64..2.0, 2..20),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ConditionParams::init(m, d, 4, &mut rng);
        let g = embeddings(l, d, EmbeddingSource::TextGlobal, &values);
        let lo = embeddings(l, d, EmbeddingSource::TextLocal, &values[1..]);
        let v = embeddings(l, d, EmbeddingSource::Visual, &values);
        let w = build_condition(&g, &lo, &v, &p, m, AblationFlags::FULL).unwrap();
        let rows = match m {
            ConditionMode::Dual => 2 * l,
            ConditionMode::AllInMlp => l,
            ConditionMode::AllInXattn => 3 * l,
        };
        prop_assert_eq!((w.len(), w.dim()), (rows, d));
    }

    #[test]
    fn ablated_inputs_do_not_reach_the_context(
        m in mode(),
        which in 0usize..3,
        first in prop::collection::vec(-2.0f64..2.0, 1..20),
        second in prop::collection::vec(-2.0f64..2.0, 1..20),
        seed in any::<u64>(),
    ) {
        let (l, d) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ConditionParams::init(m, d, 5, &mut rng);
        let mut flags = AblationFlags::FULL;
        match which {
            0 => flags.use_global = false,
            1 => flags.use_local = false,
            _ => flags.use_visual = false,
        }
        let build = |changed: &[f64]| {
            let pick = |i: usize| if i == which { changed } else { &first[..] };
            let g = embeddings(l, d, EmbeddingSource::TextGlobal, pick(0));
            let lo = embeddings(l, d, EmbeddingSource::TextLocal, pick(1));
            let v = embeddings(l, d, EmbeddingSource::Visual, pick(2));
            build_condition(&g, &lo, &v, &p, m, flags).unwrap()
        };
        prop_assert_eq!(build(&first), build(&second));
    }

    #[test]
    fn archive_round_trips_f32_values(
        mats in prop::collection::btree_map(
            "[a-z][a-z0-9._]{0,12}",
            (1usize..5, 1usize..5, prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 16)),
            0..6,
        ),
    ) {
        let mut store = ParamStore::new();
        for (name, (r, c, vals)) in &mats {
            store.insert(name.clone(), Matrix::from_shape_fn((*r, *c), |(i, j)| f64::from(vals[i * c + j])));
        }
        let bytes = encode_archive(&store);
        let back = decode_archive(&bytes).unwrap();
        prop_assert_eq!(encode_archive(&back), bytes);
        for (name, m) in store.iter() {
            prop_assert_eq!(back.get(name).unwrap(), m);
        }
        prop_assert_eq!(back.len(), store.len());
    }

    #[test]
    fn archive_decoder_rejects_or_accepts_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_archive(&bytes);
        let mut framed = b"OPCK\x01\x00\x00\x00".to_vec();
        framed.extend(&bytes);
        let _ = decode_archive(&framed);
    }

    #[test]
    fn identical_distributions_score_exactly_one(
        row in prop::collection::vec(0.001f64..1.0, 2..12),
        n in 1usize..40,
    ) {
        let s: f64 = row.iter().sum();
        let p = ClassProbabilities::new(row.iter().map(|v| v / s).collect()).unwrap();
        let probs = vec![p; n];
        prop_assert_eq!(inception_score(&probs, 1, "").unwrap().value, 1.0);
    }
}
