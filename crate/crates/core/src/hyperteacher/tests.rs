use super::*;
use crate::taskspace::is_compositional;

fn small_spec(m: usize, k: usize, split: SplitKind) -> HyperteacherSpec {
    HyperteacherSpec {
        h: 8,
        layers: 2,
        moment_samples: 4096,
        ..HyperteacherSpec::new(m, k, split)
    }
}

fn moments(cols: &[Vec<f64>]) -> Vec<(f64, f64)> {
    cols.iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt())
        })
        .collect()
}

#[test]
fn normalized_outputs_have_unit_moments() {
    let spec = HyperteacherSpec::new(4, 2, SplitKind::Compositional { frac: 0.75 });
    let t = make_hyperteacher(&spec, &mut RngState::new(3)).unwrap();
    assert_eq!(t.samples, MOMENT_SAMPLES);
    assert!(t.std.iter().all(|&s| s > 0.0));
    let all = enumerate_masks(4, 2, SamplerKind::Discrete).unwrap();
    let mut rng = RngState::new(99);
    let mut cols = vec![Vec::new(); spec.o];
    let per_mask = MOMENT_SAMPLES / all.len();
    for mask in all.masks() {
        let x = hypercube_inputs(per_mask, spec.n, &mut rng);
        let y = t.forward(mask, &x).unwrap();
        for r in 0..per_mask {
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(y.get(r, c));
            }
        }
    }
    for (mean, std) in moments(&cols) {
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }
}

#[test]
fn zero_readout_is_degenerate() {
    let spec = small_spec(4, 2, SplitKind::Noncompositional);
    let model = Model::new(Arch::LinearHnet, spec.teacher_dims()).unwrap();
    let (shared, _) = model.init(&mut RngState::new(0)).unwrap();
    let mut gens = ParamTree::new();
    for (name, leaf) in shared.iter() {
        if name.starts_with("gen.") {
            let v = if name == "gen.last" {
                Tensor2::zeros(leaf.rows(), leaf.cols())
            } else {
                leaf.clone()
            };
            gens.insert(name, v);
        }
    }
    let all = enumerate_masks(4, 2, SamplerKind::Discrete).unwrap();
    let err = NormalizedTeacher::fit(model, gens, &all, 256, &mut RngState::new(1)).unwrap_err();
    assert!(matches!(err, Error::DegenerateTeacher(_)));
}

#[test]
fn teacher_is_reproducible() {
    let spec = small_spec(4, 2, SplitKind::Noncompositional);
    let a = make_hyperteacher(&spec, &mut RngState::new(5)).unwrap();
    let b = make_hyperteacher(&spec, &mut RngState::new(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn noncompositional_split_counts() {
    let spec = HyperteacherSpec::new(8, 2, SplitKind::Noncompositional);
    let (train, ood) = make_splits(&spec, &mut RngState::new(0)).unwrap();
    assert_eq!(train.len(), 28);
    assert_eq!(ood.len(), 8);
    assert!(train.masks().iter().all(|m| !m.get(7)));
    assert!(ood.masks().iter().all(|m| m.get(7)));
}

#[test]
fn connected_split_counts() {
    let spec = HyperteacherSpec::new(8, 2, SplitKind::Connected);
    let (train, ood) = make_splits(&spec, &mut RngState::new(0)).unwrap();
    assert_eq!(train.len(), 24);
    assert!(ood.masks().iter().all(|m| m.popcount() == 2 && !train.contains(m)));
    let spec = HyperteacherSpec::new(8, 2, SplitKind::Disconnected);
    let (train, ood) = make_splits(&spec, &mut RngState::new(0)).unwrap();
    assert!(ood.masks().iter().all(|m| m.popcount() == 2 && !train.contains(m)));
}

#[test]
fn compositional_split_covers_every_module() {
    let spec = HyperteacherSpec::new(4, 2, SplitKind::Compositional { frac: 0.75 });
    for seed in 0..20 {
        let (train, ood) = make_splits(&spec, &mut RngState::new(seed)).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(ood.len(), 2);
        assert!(is_compositional(&train));
        for m in ood.masks() {
            for i in m.active() {
                assert!(train.masks().iter().any(|t| t.get(i)));
            }
        }
    }
}

#[test]
fn single_module_split_holds_out_combinations() {
    let spec = HyperteacherSpec::new(6, 1, SplitKind::Compositional { frac: 0.75 });
    let (train, ood) = make_splits(&spec, &mut RngState::new(0)).unwrap();
    assert_eq!(train.len(), 6);
    assert!(train.masks().iter().all(|m| m.popcount() == 1));
    assert_eq!(ood.len(), 15 + 20 + 15);
    assert_eq!(ood.max_popcount(), 4);
}

#[test]
fn tasks_draw_fresh_samples_with_fixed_latent() {
    let spec = small_spec(4, 2, SplitKind::Noncompositional);
    let t = make_hyperteacher(&spec, &mut RngState::new(2)).unwrap();
    let mask = TaskMask::parse("1010").unwrap();
    let mut rng = RngState::new(0);
    let a = make_task(&t, &mask, 16, &mut rng).unwrap();
    let b = make_task(&t, &mask, 16, &mut rng).unwrap();
    assert_eq!(a.task.z, b.task.z);
    assert_ne!(a.support.x, b.support.x);
    assert_ne!(a.support.x, a.query.x);
    let z = a.task.z.as_deref().unwrap();
    for (got, want) in z.iter().zip([0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert!(a.support.x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

/// Forward pass of the teacher written out with module `i`'s generator rows
/// as the layer weights.
fn module_forward(t: &NormalizedTeacher, i: usize, x: &Tensor2) -> Tensor2 {
    let d = t.model.dims;
    let shapes = d.layer_shapes();
    let mut weights = Vec::new();
    for (g, targets) in generator_targets(&d) {
        let row = t.shared.leaf(&format!("gen.{g}")).unwrap().row(i).to_vec();
        for (off, fi, fo) in targets {
            weights.push(Tensor2::from_vec(fi, fo, row[off..off + fi * fo].to_vec()).unwrap());
        }
    }
    assert_eq!(weights.len(), shapes.len());
    let mut h = x.clone();
    let last = weights.len() - 1;
    for (k, w) in weights.iter().enumerate() {
        let mut lin = h.matmul(w).unwrap().scale(1.0 / (w.rows() as f64).sqrt());
        if k < last {
            lin = lin.map(|v| v.max(0.0));
        }
        h = lin;
    }
    Tensor2::from_fn(h.rows(), h.cols(), |r, c| (h.get(r, c) - t.mean[c]) / t.std[c])
}

#[test]
fn single_module_task_uses_that_module() {
    let spec = small_spec(4, 1, SplitKind::Compositional { frac: 0.75 });
    let t = make_hyperteacher(&spec, &mut RngState::new(4)).unwrap();
    let x = hypercube_inputs(10, spec.n, &mut RngState::new(8));
    for i in 0..4 {
        let mask = TaskMask::from_indices(4, &[i]).unwrap();
        let got = t.forward(&mask, &x).unwrap();
        let want = module_forward(&t, i, &x);
        assert!(got.sub(&want).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn targets_are_standardized_over_tasks() {
    let spec = small_spec(4, 2, SplitKind::Noncompositional);
    let t = make_hyperteacher(&spec, &mut RngState::new(6)).unwrap();
    let all = enumerate_masks(4, 2, SamplerKind::Discrete).unwrap();
    let src = HyperteacherSource {
        teacher: Arc::new(t),
        set: all,
        shots: 8,
        per_layer_masks: false,
    };
    let mut rng = RngState::new(1);
    let mut cols = vec![Vec::new(); spec.o];
    for _ in 0..2000 {
        let ep = src.sample(&mut rng).unwrap();
        for r in 0..ep.query.y.rows() {
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(ep.query.y.get(r, c));
            }
        }
    }
    for (mean, std) in moments(&cols) {
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((std - 1.0).abs() < 0.1, "std {std}");
    }
}

#[test]
fn per_layer_masks_differ_from_shared_mask() {
    let spec = small_spec(4, 2, SplitKind::Noncompositional);
    let t = make_hyperteacher(&spec, &mut RngState::new(2)).unwrap();
    let a = TaskMask::parse("1000").unwrap();
    let b = TaskMask::parse("0110").unwrap();
    let x = hypercube_inputs(8, spec.n, &mut RngState::new(0));
    let same = t.forward_layers(&[&a, &a, &a], &x).unwrap();
    assert_eq!(same, t.forward(&a, &x).unwrap());
    let mixed = t.forward_layers(&[&a, &b, &a], &x).unwrap();
    assert!(mixed.sub(&same).unwrap().max_abs() > 1e-6);
    assert!(t.forward_layers(&[&a, &b], &x).is_err());
}

#[test]
fn spec_validation() {
    assert!(HyperteacherSpec::new(4, 5, SplitKind::Noncompositional)
        .validate()
        .is_err());
    assert!(HyperteacherSpec::new(4, 0, SplitKind::Noncompositional)
        .validate()
        .is_err());
    assert!(HyperteacherSpec::new(4, 2, SplitKind::Compositional { frac: 1.0 })
        .validate()
        .is_err());
    let json = serde_json::to_string(&HyperteacherSpec::new(4, 2, SplitKind::Connected)).unwrap();
    let back: HyperteacherSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back.split, SplitKind::Connected);
}

fn tiny_experiment(arch: Arch) -> HyperteacherExperiment {
    let mut exp = HyperteacherExperiment::scaled(4, 2, SplitKind::Compositional { frac: 0.75 }, arch).unwrap();
    exp.spec.h = 8;
    exp.spec.moment_samples = 1024;
    exp.dims = match arch {
        Arch::Anil | Arch::Maml => ModelDims::mlp(16, 8, 2, 8),
        _ => ModelDims::hnet(16, 8, 2, 8, 8),
    };
    exp.train.b_outer = 2;
    exp.train.n_outer = 3;
    exp.train.n_inner = 2;
    exp.train.log_every = 1;
    exp.train.record_wall_time = false;
    exp.shots = 8;
    exp.eval_tasks = 4;
    exp.ood_tasks_per_mask = 3;
    exp
}

#[test]
fn run_reports_consistent_metrics() {
    let exp = tiny_experiment(Arch::LinearHnet);
    let r = run_hyperteacher(&exp).unwrap();
    assert_eq!(r.train_masks, 8);
    assert_eq!(r.ood_masks, 2);
    assert_eq!(r.ood_acc_by_k.len(), 4);
    assert!(r.ood_acc_by_k[2..].iter().all(Option::is_none));
    let d = r.decode.as_ref().expect("hypernetworks are decoded");
    assert_eq!(d.r2_val_per_module.len(), 4);
    assert!((0.0..=100.0).contains(&r.ood_acc));
    let again = run_hyperteacher(&exp).unwrap();
    assert_eq!(r.ood_acc, again.ood_acc);
    assert_eq!(r.log, again.log);
    let row = r.csv_row();
    assert_eq!(row.split(',').count(), 3 + 4);
    assert!(HyperteacherResult::csv_header(4).ends_with("ood_acc_k4"));
}

#[test]
fn anil_run_has_no_decoding() {
    let r = run_hyperteacher(&tiny_experiment(Arch::Anil)).unwrap();
    assert!(r.decode.is_none());
}

#[test]
fn per_k_slices_reweight_to_overall() {
    let mut exp = tiny_experiment(Arch::LinearHnet);
    exp.spec.split = SplitKind::Compositional { frac: 0.75 };
    exp.spec.k = 1;
    let r = run_hyperteacher(&exp).unwrap();
    let counts = [0usize, 6, 4, 1];
    let total: usize = counts.iter().sum();
    assert_eq!(r.ood_masks, total);
    let weighted: f64 = r
        .ood_acc_by_k
        .iter()
        .zip(counts)
        .filter_map(|(a, c)| a.map(|a| a * c as f64))
        .sum::<f64>()
        / total as f64;
    assert!((weighted - r.ood_acc).abs() < 1e-9);
}
