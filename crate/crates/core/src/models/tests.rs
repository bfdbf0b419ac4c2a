use super::*;
use crate::numcore::one_hot;
use proptest::prelude::*;

fn small_dims(arch: Arch) -> ModelDims {
    match arch {
        Arch::LinearHnetTheory => ModelDims::theory(4, 3, 2, 3),
        Arch::LinearHnet => ModelDims::hnet(3, 4, 2, 3, 3),
        Arch::NonlinearHnet => ModelDims {
            gen_hidden: 5,
            ..ModelDims::hnet(3, 4, 2, 3, 3)
        },
        Arch::Maml | Arch::Anil => ModelDims::mlp(3, 4, 2, 3),
    }
}

/// Init, then overwrite every leaf with fresh normals so biases are nonzero too.
fn random_params(model: &Model, rng: &mut RngState) -> (ParamTree, ParamTree) {
    let (shared, fast) = model.init(rng).unwrap();
    let mut randomize = |t: &ParamTree| -> ParamTree {
        t.iter()
            .map(|(k, v)| (k.to_string(), rng.normal_tensor(v.rows(), v.cols(), 0.7)))
            .collect()
    };
    (randomize(&shared), randomize(&fast))
}

fn random_batch(model: &Model, loss: LossKind, rows: usize, rng: &mut RngState) -> Batch {
    let d = model.dims;
    let x = rng.normal_tensor(rows, d.input, 1.0);
    let y = match loss {
        LossKind::Xent => {
            let idx: Vec<usize> = (0..rows).map(|_| rng.below(d.output)).collect();
            one_hot(&idx, d.output).unwrap()
        }
        _ => rng.normal_tensor(rows, d.output, 1.0),
    };
    Batch::new(x, y).unwrap()
}

fn merged(shared: &ParamTree, fast: &ParamTree) -> ParamTree {
    shared.with_prefix("shared/").merge(&fast.with_prefix("fast/")).unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = RngState::new(2024);
    for arch in Arch::ALL {
        let model = Model::new(arch, small_dims(arch)).unwrap();
        for loss in LossKind::ALL {
            let id = format!("{}:{}", arch.name(), loss.name());
            for _ in 0..20 {
                let (s, f) = random_params(&model, &mut rng);
                let batch = random_batch(&model, loss, 5, &mut rng);
                let err = gradient_check(&id, &model.dims, &merged(&s, &f), &batch, 1e-5, GRAD_CHECK_FLOOR).unwrap();
                assert!(err <= 1e-5, "{id}: relative error {err}");
            }
        }
    }
}

#[test]
fn quadratic_registered_function() {
    let params = ParamTree::new().with("w", Tensor2::row_vector(vec![1.0, 2.0]));
    let batch = Batch::new(Tensor2::zeros(1, 1), Tensor2::zeros(1, 1)).unwrap();
    let dims = ModelDims::mlp(1, 1, 1, 1);
    let (v, g) = value_and_grad("quadratic", &dims, &params, &batch).unwrap();
    assert_eq!(v, 2.5);
    assert_eq!(g.leaf("w").unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn unknown_function_ids() {
    let batch = Batch::new(Tensor2::zeros(1, 1), Tensor2::zeros(1, 1)).unwrap();
    let dims = ModelDims::mlp(1, 1, 1, 1);
    for id in ["resnet:mse", "maml:hinge", "maml", ""] {
        assert!(matches!(
            value_and_grad(id, &dims, &ParamTree::new(), &batch),
            Err(Error::NotFound(_))
        ));
    }
    assert_eq!(FunctionId::registered().len(), 16);
}

#[test]
fn zero_readout_gives_zero_theta_gradient() {
    let mut rng = RngState::new(5);
    let model = Model::new(Arch::LinearHnetTheory, small_dims(Arch::LinearHnetTheory)).unwrap();
    let (mut s, f) = random_params(&model, &mut rng);
    s.insert("readout", Tensor2::zeros(3, 2));
    let batch = random_batch(&model, LossKind::Mse, 6, &mut rng);
    let lg = model.loss_grad(&s, &f, &batch, LossKind::Mse, true, true).unwrap();
    assert_eq!(lg.shared.unwrap().leaf("theta").unwrap().max_abs(), 0.0);
    assert_eq!(lg.fast.unwrap().leaf("z").unwrap().max_abs(), 0.0);
}

#[test]
fn shape_mismatch_is_invalid_argument() {
    let mut rng = RngState::new(5);
    let model = Model::new(Arch::Maml, small_dims(Arch::Maml)).unwrap();
    let (s, f) = model.init(&mut rng).unwrap();
    let bad = Tensor2::zeros(2, 7);
    assert!(matches!(model.forward(&s, &f, &bad), Err(Error::InvalidArgument(_))));
    let batch = Batch::new(Tensor2::zeros(2, 3), Tensor2::zeros(2, 5)).unwrap();
    assert!(matches!(
        model.loss_grad(&s, &f, &batch, LossKind::Mse, false, true),
        Err(Error::InvalidArgument(_))
    ));
}

fn random_teacher(m: usize, n: usize, h: usize, o: usize, rng: &mut RngState) -> TeacherParams {
    TeacherParams::new(rng.normal_tensor(m, h * n, 1.0), rng.normal_tensor(h, o, 1.0), n).unwrap()
}

#[test]
fn generate_w_basis_zero_and_loop_oracle() {
    let mut rng = RngState::new(9);
    let t = random_teacher(4, 5, 3, 2, &mut rng);
    for m in 0..4 {
        let mut e = vec![0.0; 4];
        e[m] = 1.0;
        assert_eq!(generate_w(&t, &e).unwrap(), t.module(m));
    }
    assert_eq!(generate_w(&t, &[0.0; 4]).unwrap().max_abs(), 0.0);
    let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let w = generate_w(&t, &z).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut acc = 0.0;
            for (m, zm) in z.iter().enumerate() {
                acc += zm * t.module(m).get(i, j);
            }
            assert!((w.get(i, j) - acc).abs() < 1e-15);
        }
    }
    assert!(generate_w(&t, &[1.0; 3]).is_err());
}

proptest! {
    #[test]
    fn generate_w_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = RngState::new(seed);
        let t = random_teacher(5, 4, 3, 2, &mut rng);
        let z1: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let z2: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let zc: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
        let lhs = generate_w(&t, &zc).unwrap();
        let rhs = generate_w(&t, &z1).unwrap().scale(a).add(&generate_w(&t, &z2).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn teacher_positively_homogeneous(seed in 0u64..1000, c in 0.01f64..10.0) {
        let mut rng = RngState::new(seed);
        let t = random_teacher(4, 6, 5, 3, &mut rng);
        let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let zc: Vec<f64> = z.iter().map(|v| c * v).collect();
        let x = rng.normal_tensor(7, 6, 1.0);
        let y = teacher_forward(&t, &z, &x).unwrap().scale(c);
        let yc = teacher_forward(&t, &zc, &x).unwrap();
        prop_assert!(y.sub(&yc).unwrap().max_abs() <= 1e-12 * (1.0 + y.max_abs()));
    }

    #[test]
    fn embedding_scale_invariance(seed in 0u64..1000, c in 0.01f64..100.0, which in 0usize..3) {
        let mut rng = RngState::new(seed);
        let model = Model::new(Arch::LinearHnet, ModelDims::hnet(3, 5, 3, 2, 4)).unwrap();
        let (s, f) = random_params(&model, &mut rng);
        let x = rng.normal_tensor(6, 3, 1.0);
        let name = ["emb.first", "emb.hidden", "emb.last"][which];
        let mut f2 = f.clone();
        f2.get_mut(name).unwrap().scale_in_place(c);
        let y1 = model.forward(&s, &f, &x).unwrap();
        let y2 = model.forward(&s, &f2, &x).unwrap();
        prop_assert!(y1.sub(&y2).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn teacher_hand_example_and_zero_latent() {
    let t = TeacherParams::new(Tensor2::filled(1, 1, 2.0), Tensor2::filled(1, 1, 3.0), 1).unwrap();
    let y = teacher_forward(&t, &[1.0], &Tensor2::filled(1, 1, 1.0)).unwrap();
    assert_eq!(y.get(0, 0), 6.0);
    let mut rng = RngState::new(1);
    let t = random_teacher(3, 4, 5, 2, &mut rng);
    let x = rng.normal_tensor(10, 4, 1.0);
    assert_eq!(teacher_forward(&t, &[0.0; 3], &x).unwrap().max_abs(), 0.0);
}

#[test]
fn zero_padding_scales_preactivations() {
    let mut rng = RngState::new(3);
    let (m, n, h) = (3, 4, 5);
    let t = random_teacher(m, n, h, 2, &mut rng);
    // double n by appending zero input columns to every module
    let padded = Tensor2::from_fn(m, h * 2 * n, |mm, c| {
        let (i, j) = (c / (2 * n), c % (2 * n));
        if j < n {
            t.theta.get(mm, i * n + j)
        } else {
            0.0
        }
    });
    let t2 = TeacherParams::new(padded, t.readout.clone(), 2 * n).unwrap();
    let z = [0.3, -1.2, 0.8];
    let x = rng.normal_tensor(6, n, 1.0);
    let x2 = Tensor2::from_fn(6, 2 * n, |r, c| if c < n { x.get(r, c) } else { 0.0 });
    let pre = x
        .matmul_bt(&generate_w(&t, &z).unwrap())
        .unwrap()
        .scale(1.0 / (n as f64).sqrt());
    let pre2 = x2
        .matmul_bt(&generate_w(&t2, &z).unwrap())
        .unwrap()
        .scale(1.0 / (2.0 * n as f64).sqrt());
    let diff = pre.scale(1.0 / 2f64.sqrt()).sub(&pre2).unwrap().max_abs();
    assert!(diff < 1e-15);
}

#[test]
fn theory_student_matches_teacher() {
    let mut rng = RngState::new(4);
    let t = random_teacher(3, 4, 5, 2, &mut rng);
    let (model, shared) = t.as_student();
    let z = [0.5, -0.1, 0.9];
    let fast = ParamTree::new().with("z", Tensor2::row_vector(z.to_vec()));
    let x = rng.normal_tensor(8, 4, 1.0);
    let a = model.forward(&shared, &fast, &x).unwrap();
    let b = teacher_forward(&t, &z, &x).unwrap();
    assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
    assert_eq!(TeacherParams::from_student(&shared, 4).unwrap(), t);
}

#[test]
fn neuron_slice_layout() {
    let mut rng = RngState::new(4);
    let t = random_teacher(3, 4, 5, 2, &mut rng);
    let s = t.neuron_slice(2);
    assert_eq!(s.shape(), (4, 3));
    for m in 0..3 {
        for j in 0..4 {
            assert_eq!(s.get(j, m), t.module(m).get(2, j));
        }
    }
}

#[test]
fn linear_hnet_basis_embedding_selects_generator_row() {
    let mut rng = RngState::new(8);
    let model = Model::new(Arch::LinearHnet, ModelDims::hnet(3, 4, 1, 2, 5)).unwrap();
    let (s, mut f) = model.init(&mut rng).unwrap();
    let mut e = Tensor2::zeros(1, 5);
    e.set(0, 0, 1.0);
    f.insert("emb.first", e.clone());
    f.insert("emb.last", e);
    let x = rng.normal_tensor(5, 3, 1.0);
    let w0 = Tensor2::from_vec(3, 4, s.leaf("gen.first").unwrap().row(0).to_vec()).unwrap();
    let w1 = Tensor2::from_vec(4, 2, s.leaf("gen.last").unwrap().row(0).to_vec()).unwrap();
    let h = x.matmul(&w0).unwrap().map(|v| (v / 3f64.sqrt()).max(0.0));
    let y = h.matmul(&w1).unwrap().scale(0.5);
    assert!(model.forward(&s, &f, &x).unwrap().sub(&y).unwrap().max_abs() < 1e-14);
}

#[test]
fn anil_identity_body() {
    let model = Model::new(Arch::Anil, ModelDims::mlp(3, 3, 1, 2)).unwrap();
    let shared = ParamTree::new()
        .with("body.w0", Tensor2::identity(3))
        .with("body.b0", Tensor2::zeros(1, 3));
    let r = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
    let fast = ParamTree::new()
        .with("readout.w", r.clone())
        .with("readout.b", Tensor2::zeros(1, 2));
    let x = Tensor2::from_rows(&[vec![0.5, 1.0, 2.0], vec![3.0, 0.1, 0.2]]).unwrap();
    let y = model.forward(&shared, &fast, &x).unwrap();
    assert!(y.sub(&x.matmul(&r).unwrap()).unwrap().max_abs() < 1e-15);
}

#[test]
fn nonlinear_generator_layer_norm_statistics() {
    let mut rng = RngState::new(12);
    let model = Model::new(Arch::NonlinearHnet, ModelDims::hnet(3, 4, 2, 2, 6)).unwrap();
    let (s, f) = random_params(&model, &mut rng);
    let x = rng.normal_tensor(4, 3, 1.0);
    assert!(model.forward(&s, &f, &x).unwrap().all_finite());
    // recompute each generator's normalized pre-activations by hand
    for g in ["first", "hidden", "last"] {
        let mut h = f.leaf(&format!("emb.{g}")).unwrap().clone();
        for k in 0..GENERATOR_DEPTH {
            let mean = h.sum() / h.len() as f64;
            let var = h.map(|v| (v - mean) * (v - mean)).sum() / h.len() as f64;
            let normed = h.map(|v| (v - mean) / (var + 1e-12).sqrt());
            let nm = normed.sum() / normed.len() as f64;
            let nv = normed.sum_sq() / normed.len() as f64 - nm * nm;
            assert!(nm.abs() < 1e-6 && (nv - 1.0).abs() < 1e-6, "{g} layer {k}");
            let w = s.leaf(&format!("gen.{g}.w{k}")).unwrap();
            let b = s.leaf(&format!("gen.{g}.b{k}")).unwrap();
            let inp = if k == 0 {
                normed.clone()
            } else {
                normed.map(|v| if v > 0.0 { v } else { v.exp_m1() })
            };
            h = inp.matmul(w).unwrap().add(b).unwrap();
        }
    }
}

// Straight-line references written with plain loops.

fn ref_affine(x: &[Vec<f64>], w: &Tensor2, b: Option<&Tensor2>, scale: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| {
                    let mut acc = 0.0;
                    for (k, xv) in row.iter().enumerate() {
                        acc += xv * w.get(k, c);
                    }
                    acc * scale + b.map_or(0.0, |b| b.get(0, c))
                })
                .collect()
        })
        .collect()
}

fn ref_relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect()
}

fn rows(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn ref_generate(emb: &Tensor2, gen: &Tensor2, normalize: bool) -> Vec<f64> {
    let norm: f64 = if normalize {
        emb.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        1.0
    };
    (0..gen.cols())
        .map(|c| (0..gen.rows()).map(|m| emb.get(0, m) / norm * gen.get(m, c)).sum())
        .collect()
}

fn ref_mlp_gen(emb: &Tensor2, s: &ParamTree, g: &str) -> Vec<f64> {
    let ln = |v: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let mean: f64 = v.iter().sum::<f64>() / n;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        v.iter().map(|a| (a - mean) / (var + 1e-12).sqrt()).collect()
    };
    let mut h = ln(emb.row(0));
    for k in 0..4 {
        let w = s.leaf(&format!("gen.{g}.w{k}")).unwrap();
        let b = s.leaf(&format!("gen.{g}.b{k}")).unwrap();
        let mut out = vec![0.0; w.cols()];
        for c in 0..w.cols() {
            out[c] = b.get(0, c) + (0..w.rows()).map(|r| h[r] * w.get(r, c)).sum::<f64>();
        }
        h = if k < 3 {
            ln(&out)
                .into_iter()
                .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 })
                .collect()
        } else {
            out
        };
    }
    h
}

fn reference_forward(model: &Model, s: &ParamTree, f: &ParamTree, x: &Tensor2) -> Vec<Vec<f64>> {
    let d = model.dims;
    match model.arch {
        Arch::LinearHnetTheory => {
            let flat = ref_generate(f.leaf("z").unwrap(), s.leaf("theta").unwrap(), false);
            let a = s.leaf("readout").unwrap();
            rows(x)
                .iter()
                .map(|xr| {
                    let hid: Vec<f64> = (0..d.hidden)
                        .map(|i| {
                            let p: f64 = (0..d.input).map(|j| flat[i * d.input + j] * xr[j]).sum();
                            (p / (d.input as f64).sqrt()).max(0.0)
                        })
                        .collect();
                    (0..d.output)
                        .map(|c| (0..d.hidden).map(|i| hid[i] * a.get(i, c)).sum())
                        .collect()
                })
                .collect()
        }
        Arch::LinearHnet | Arch::NonlinearHnet => {
            let shapes = d.layer_shapes();
            let l = d.layers;
            let gen = |g: &str| {
                let emb = f.leaf(&format!("emb.{g}")).unwrap();
                if model.arch == Arch::LinearHnet {
                    ref_generate(emb, s.leaf(&format!("gen.{g}")).unwrap(), true)
                } else {
                    ref_mlp_gen(emb, s, g)
                }
            };
            let mut ws = vec![Tensor2::from_vec(shapes[0].0, shapes[0].1, gen("first")).unwrap()];
            if l >= 2 {
                let hid = gen("hidden");
                let sz = d.hidden * d.hidden;
                for k in 0..l - 1 {
                    ws.push(Tensor2::from_vec(d.hidden, d.hidden, hid[k * sz..(k + 1) * sz].to_vec()).unwrap());
                }
            }
            ws.push(Tensor2::from_vec(shapes[l].0, shapes[l].1, gen("last")).unwrap());
            let mut h = rows(x);
            for (k, w) in ws.iter().enumerate() {
                let b = f.leaf(&format!("bias.{k}")).unwrap();
                h = ref_affine(&h, w, Some(b), 1.0 / (w.rows() as f64).sqrt());
                if k < l {
                    h = ref_relu(h);
                }
            }
            h
        }
        Arch::Maml => {
            let mut h = rows(x);
            for k in 0..=d.layers {
                h = ref_affine(
                    &h,
                    f.leaf(&format!("w{k}")).unwrap(),
                    Some(f.leaf(&format!("b{k}")).unwrap()),
                    1.0,
                );
                if k < d.layers {
                    h = ref_relu(h);
                }
            }
            h
        }
        Arch::Anil => {
            let mut h = rows(x);
            for k in 0..d.layers {
                h = ref_relu(ref_affine(
                    &h,
                    s.leaf(&format!("body.w{k}")).unwrap(),
                    Some(s.leaf(&format!("body.b{k}")).unwrap()),
                    1.0,
                ));
            }
            ref_affine(
                &h,
                f.leaf("readout.w").unwrap(),
                Some(f.leaf("readout.b").unwrap()),
                1.0,
            )
        }
    }
}

#[test]
fn forwards_match_straight_line_references() {
    let mut rng = RngState::new(77);
    for arch in Arch::ALL {
        for _ in 0..50 {
            let layers = 1 + rng.below(3);
            let (n, h, o, m) = (1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(5));
            let dims = match arch {
                Arch::LinearHnetTheory => ModelDims::theory(n, h, o, m),
                Arch::LinearHnet | Arch::NonlinearHnet => ModelDims::hnet(n, h, layers, o, m),
                _ => ModelDims::mlp(n, h, layers, o),
            };
            let model = Model::new(arch, dims).unwrap();
            let (s, f) = random_params(&model, &mut rng);
            let rows_n = 1 + rng.below(6);
            let x = rng.normal_tensor(rows_n, n, 1.0);
            let got = model.forward(&s, &f, &x).unwrap();
            let want = reference_forward(&model, &s, &f, &x);
            for (r, row) in want.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let err = (got.get(r, c) - v).abs();
                    assert!(err <= 1e-12 * (1.0 + v.abs()), "{arch}: {err}");
                }
            }
        }
    }
}

#[test]
fn init_statistics() {
    let mut rng = RngState::new(31);
    for arch in Arch::ALL {
        let model = Model::new(arch, small_dims(arch)).unwrap();
        let (s, f) = model.init(&mut rng).unwrap();
        for (name, v) in s.iter().chain(f.iter()) {
            let base = name.rsplit('.').next().unwrap();
            if base.starts_with('b') || name.contains("bias") {
                assert_eq!(v.max_abs(), 0.0, "{arch} {name}");
            }
        }
        if arch.learned_init() {
            assert_eq!(model.fast_start(&s, &ParamTree::new()), f);
        }
    }

    // generator leaf with 16 embedding dims and many columns
    let model = Model::new(Arch::LinearHnet, ModelDims::hnet(100, 100, 1, 1000, 16)).unwrap();
    let (s, f) = model.init(&mut rng).unwrap();
    let g = s.leaf("gen.last").unwrap();
    assert!(g.len() >= 100_000);
    let std = (g.sum_sq() / g.len() as f64).sqrt();
    let want = 0.25 * crate::numcore::TRUNC_NORMAL_STD_RATIO;
    assert!((std - want).abs() / want < 0.1, "{std} vs {want}");
    assert_eq!(f.leaf("emb.first").unwrap().cols(), 16);

    let big = Model::new(Arch::LinearHnet, ModelDims::hnet(2, 2, 1, 2, 100_000)).unwrap();
    let (_, f) = big.init(&mut rng).unwrap();
    let e = f.leaf("emb.first").unwrap();
    let var = e.sum_sq() / e.len() as f64;
    assert!((var - 1.0).abs() < 0.05, "{var}");
    assert!(e.max_abs() <= 3f64.sqrt());
}

#[test]
fn default_dims_table() {
    assert_eq!(
        default_dims("hyperteacher", Arch::Anil, 4).unwrap(),
        ModelDims::mlp(16, 512, 3, 8)
    );
    let d = default_dims("prefgrid", Arch::Maml, 8).unwrap();
    assert_eq!((d.layers, d.hidden), (3, 368));
    let d = default_dims("compgrid", Arch::LinearHnet, 8).unwrap();
    assert_eq!((d.layers, d.hidden, d.modules), (2, 32, 8));
    let d = default_dims("hyperteacher", Arch::LinearHnet, 6).unwrap();
    assert_eq!((d.layers, d.hidden, d.modules), (3, 128, 24));
    assert!(matches!(default_dims("theory", Arch::Maml, 6), Err(Error::NotFound(_))));
}

#[test]
fn checkpoint_roundtrip() {
    let mut rng = RngState::new(6);
    let model = Model::new(Arch::Anil, small_dims(Arch::Anil)).unwrap();
    let (s, f) = model.init(&mut rng).unwrap();
    let ck = Checkpoint::new(model, s, f);
    let json = ck.to_json().unwrap();
    assert!(json.contains("\"version\":1"));
    assert_eq!(Checkpoint::from_json(&json).unwrap(), ck);
    let bumped = json.replace("\"version\":1", "\"version\":9");
    assert!(Checkpoint::from_json(&bumped).is_err());
}
