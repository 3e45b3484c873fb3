use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use proptest::prelude::*;

use signcon::augment::{augment_pose, gather_clip, gather_pose, make_views, AugmentConfig};
use signcon::autograd::Params;
use signcon::checkpoint::Checkpoint;
use signcon::config::RunConfig;
use signcon::contrastive::{ema_update, info_nce, spm_pseudo_labels, MemoryBank};
use signcon::corpus::{generate_corpus, CorpusSpec, Sample};
use signcon::eval::{topk_accuracy, AccuracyMode};
use signcon::mpm::{mask_latent_with, MaskRule};
use signcon::rng::stream;
use signcon::training::{lr_at, Schedule};

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * dim).prop_map(move |v| {
        let mut a = Array2::from_shape_vec((rows, dim), v).unwrap();
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt().max(1e-3);
            r.mapv_inplace(|x| x / n);
            if r.dot(&r) < 0.5 {
                r.fill(0.0);
                r[0] = 1.0;
            }
        }
        a
    })
}

fn tiny_samples() -> Vec<Sample> {
    let spec = CorpusSpec {
        num_classes: 2,
        samples_per_class: 2,
        eval_samples_per_class: 0,
        t_raw: 20,
        height: 16,
        width: 16,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fifo_overwrites_oldest(ratio in 1usize..6, b in 1usize..4, pushes in 0usize..20, seed in any::<u64>()) {
        let n = ratio * b;
        let dim = 3;
        let mut r = stream(seed, &[]);
        let mut bank = MemoryBank::random(n, dim, &mut r).unwrap();
        let mut written: Vec<Array1<f64>> = bank.rows().rows().into_iter().map(|x| x.to_owned()).collect();
        for step in 0..pushes {
            let rows = Array2::from_shape_fn((b, dim), |(i, j)| (1 + i + j + step) as f64);
            let start = bank.cursor();
            bank.enqueue(rows.view()).unwrap();
            for i in 0..b {
                written[(start + i) % n] = bank.rows().row((start + i) % n).to_owned();
            }
            prop_assert_eq!(bank.cursor(), ((step + 1) * b) % n);
        }
        for (i, row) in bank.rows().rows().into_iter().enumerate() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
            prop_assert_eq!(row.to_owned(), written[i].clone());
        }
    }

    #[test]
    fn pseudo_label_counts(k in 1usize..6, extra in 1usize..10, seed in 0u64..1000) {
        let n = k + extra;
        let mut r = stream(seed, &[1]);
        let br = MemoryBank::random(n, 4, &mut r).unwrap();
        let bp = MemoryBank::random(n, 4, &mut r).unwrap();
        let g = MemoryBank::random(2, 4, &mut r).unwrap();
        let y = spm_pseudo_labels(g.rows().row(0), g.rows().row(1), br.rows().view(), bp.rows().view(), k).unwrap();
        let c = y.iter().filter(|&&v| v).count();
        prop_assert!(k <= c && c <= 2 * k);
    }

    #[test]
    fn info_nce_nonnegative_and_zero_without_negatives(
        z in unit_rows(2, 5),
        bank in unit_rows(6, 5),
        used in 0usize..=6,
        tau in 0.05f64..1.0,
    ) {
        let negs = bank.slice(ndarray::s![..used, ..]);
        let v = info_nce(z.row(0), z.row(1), negs, tau).unwrap();
        prop_assert!(v >= 0.0);
        if used == 0 {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!(v > 0.0);
        }
        // renormalizing unit inputs changes nothing
        let renorm = |a: ndarray::ArrayView1<f64>| { let n = a.dot(&a).sqrt(); a.mapv(|x| x / n) };
        let mut nb = negs.to_owned();
        for mut r in nb.rows_mut() { let x = renorm(r.view()); r.assign(&x); }
        let w = info_nce(renorm(z.row(0)).view(), renorm(z.row(1)).view(), nb.view(), tau).unwrap();
        prop_assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn ema_contracts_geometrically(vals in prop::collection::vec(-3.0f64..3.0, 12), gamma in 0.0f64..1.0, steps in 0i32..40) {
        let mut q = Params::new();
        let mut k = Params::new();
        q.push("w", ArrayD::from_shape_vec(IxDyn(&[6]), vals[..6].to_vec()).unwrap());
        k.push("w", ArrayD::from_shape_vec(IxDyn(&[6]), vals[6..].to_vec()).unwrap());
        let dist = |a: &Params, b: &Params| (&a.values()[0] - &b.values()[0]).mapv(|x| x * x).sum().sqrt();
        let d0 = dist(&k, &q);
        for _ in 0..steps {
            ema_update(&q, &mut k, gamma).unwrap();
        }
        prop_assert!((dist(&k, &q) - gamma.powi(steps) * d0).abs() < 1e-9);
    }

    #[test]
    fn accuracy_is_monotone_in_k(
        m in 1usize..15,
        c in 2usize..8,
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let mut r = stream(seed, &[2]);
        let logits = Array2::from_shape_fn((m, c), |_| r.gen_range(0..3) as f64);
        let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..c)).collect();
        for mode in [AccuracyMode::Instance, AccuracyMode::Class] {
            let mut prev = 0.0;
            for k in 1..=c {
                let a = topk_accuracy(logits.view(), &labels, k, mode).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn lr_never_rises(epochs in 1usize..60, base in 1e-4f64..1.0, drops in prop::collection::btree_set(0usize..60, 0..4)) {
        let s = Schedule {
            epochs,
            base_lr: base,
            batch_size: 1,
            lr_drop_epochs: drops.into_iter().filter(|&d| d < epochs).collect(),
            lr_drop_factor: 0.1,
        };
        for e in 1..epochs {
            prop_assert!(lr_at(e, &s) <= lr_at(e - 1, &s));
        }
    }

    #[test]
    fn survivors_shrink_with_p(vals in prop::collection::vec(-2.0f64..2.0, 24), p1 in 0.0f64..1.5, dp in 0.0f64..1.0) {
        let z = Array2::from_shape_vec((4, 6), vals).unwrap();
        for quantile in [false, true] {
            let rule = |p: f64| MaskRule { p, invert_indicator: false, p_is_quantile: quantile };
            let (za, a) = mask_latent_with(&z, &rule(p1));
            let (_, b) = mask_latent_with(&z, &rule(p1 + dp));
            prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x || !y));
            for (c, &keep) in a.iter().enumerate() {
                if keep {
                    prop_assert_eq!(za.column(c), z.column(c));
                } else {
                    prop_assert!(za.column(c).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn config_echo_round_trips(seed in any::<u64>(), bank_pow in 7u32..11, tau in 0.01f64..1.0, spm in any::<bool>(), paper in any::<bool>()) {
        let mut cfg = if paper { RunConfig::paper() } else { RunConfig::toy() };
        cfg.seed = seed;
        cfg.bank_size = 1 << bank_pow;
        cfg.loss.tau = tau;
        cfg.loss.use_spm = spm;
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        prop_assert_eq!(back.echo(), cfg.echo());
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 1..40), meta in "[a-z]{1,8}") {
        let mut c = Checkpoint::new();
        c.set_meta("note", &meta);
        let t = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.iter().map(|&v| v as f32 as f64).collect()).unwrap();
        c.push_array("x", &t);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.meta("note"), Some(meta.as_str()));
        prop_assert_eq!(back.array("x").unwrap(), t);
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn views_are_seeded_and_share_frames(seed in any::<u64>(), which in 0usize..4, lower in 0.1f64..1.0) {
        let samples = tiny_samples();
        let s = &samples[which];
        let cfg = AugmentConfig { crop_lower: lower, k: 8, t_model: 4, ..AugmentConfig::default() };
        let a = make_views(s, &cfg, &mut stream(seed, &[3]), None).unwrap();
        let b = make_views(s, &cfg, &mut stream(seed, &[3]), None).unwrap();
        prop_assert_eq!(&a.query.rgb, &b.query.rgb);
        prop_assert_eq!(&a.key.pose, &b.key.pose);
        prop_assert_eq!(a.query.rgb.len(), 4);
        prop_assert_eq!(a.query.pose.frames(), 4);

        // with spatial and pose augmentation off, both streams are the same frame gather
        let plain = AugmentConfig { crop_lower: lower, k: 8, t_model: 4, ..AugmentConfig::identity(4) };
        let v = make_views(s, &plain, &mut stream(seed, &[4]), None).unwrap();
        for view in [&v.query, &v.key] {
            prop_assert_eq!(&view.rgb, &gather_clip(&s.clip, &view.indices));
            prop_assert_eq!(&view.pose, &gather_pose(&s.pose, &view.indices));
        }
        let p = augment_pose(&s.pose, &cfg, &mut stream(seed, &[5]));
        prop_assert_eq!(p.joints().shape(), s.pose.joints().shape());
    }
}
