//! Theory checks run from the command line.

use std::fs;
use std::path::Path;

use modcomp::metrics::{module_alignment, LinearMapFit};
use modcomp::models::{teacher_forward, TeacherParams};
use modcomp::numcore::RngState;
use modcomp::taskspace::preset;
use modcomp::teacherstudent::{make_teacher, sample_inputs, TheoryDims};
use modcomp::theorylab::{
    build_disconnected_counterexample, build_wider_student_counterexample, check_linear_identification,
    check_support_conditions, check_wider_identification, exact_check, theorem2_student, Symmetry,
};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::config::{CheckName, CheckSpec};
use crate::error::{io_err, CliError, CliResult};

/// Rows per task in the theorem-2 check.
const THEOREM2_ROWS: usize = 64;
/// Input samples for the floating-point probe deviation.
const PROBE_SAMPLES: usize = 4096;

pub fn run_check(spec: &CheckSpec) -> CliResult<Value> {
    let root = RngState::new(spec.seed);
    match spec.check {
        CheckName::Theorem2 => theorem2(spec, &root),
        CheckName::Counterexamples => counterexamples(&root),
        CheckName::Support => {
            let (train, ood) = preset(&spec.preset, None, &mut root.child_named("split"))?;
            Ok(json!({
                "check": "support",
                "preset": spec.preset,
                "train_masks": train.masks().iter().map(|m| m.to_string()).collect::<Vec<_>>(),
                "ood_masks": ood.len(),
                "report": check_support_conditions(&train, None),
            }))
        }
        CheckName::Identification => {
            let dir = spec
                .run
                .as_deref()
                .ok_or_else(|| CliError::Config("identification needs a theory run directory".into()))?;
            identification(dir, spec.tol)
        }
    }
}

/// Function-preserving reparameterization of a random teacher: per-task
/// output loss and module alignment.
fn theorem2(spec: &CheckSpec, root: &RngState) -> CliResult<Value> {
    let dims = TheoryDims::default();
    let (train, _) = preset(&spec.preset, None, &mut root.child_named("split"))?;
    let teacher = make_teacher(dims, &train, &mut root.child_named("teacher"))?;
    let sym = Symmetry::random(dims.h, dims.m, &[], &mut root.child_named("symmetry"));
    let student = theorem2_student(&teacher, &sym)?;
    let mut rng = root.child_named("tasks");
    let mut losses = Vec::with_capacity(spec.tasks);
    for _ in 0..spec.tasks {
        let lat = train.sample(&mut rng)?;
        let x = sample_inputs(THEOREM2_ROWS, dims.n, &mut rng);
        let yt = teacher_forward(&teacher, &lat.z, &x)?;
        let ys = teacher_forward(&student, &sym.map_latent(&lat.z)?, &x)?;
        let d = yt.sub(&ys)?;
        losses.push(d.sum_sq() / d.data().len() as f64);
    }
    let max_loss = losses.iter().cloned().fold(0.0, f64::max);
    let alignment = module_alignment(&teacher, &student, &sym.f)?.alignment;
    Ok(json!({
        "check": "theorem2",
        "preset": spec.preset,
        "tasks": spec.tasks,
        "max_task_loss": max_loss,
        "mean_task_loss": losses.iter().sum::<f64>() / losses.len() as f64,
        "alignment": alignment,
        "pass": max_loss < 1e-10 && (alignment - 1.0).abs() <= 1e-10,
    }))
}

fn counterexamples(root: &RngState) -> CliResult<Value> {
    let mut out = Vec::new();
    for ce in [
        build_wider_student_counterexample(),
        build_disconnected_counterexample(),
    ] {
        let exact = exact_check(&ce)?;
        let probe = ce.probe_deviation(PROBE_SAMPLES, &mut root.child_named(&ce.name))?;
        out.push(json!({
            "name": ce.name,
            "train_exact_zero": exact.train_exact_zero,
            "train_evaluations": exact.train_evaluations,
            "probe_mean_sq_exact": exact.probe_mean_sq,
            "probe_mean_sq_sampled": probe,
            "pass": exact.train_exact_zero && exact.probe_mean_sq > 1e-3,
        }));
    }
    Ok(json!({ "check": "counterexamples", "constructions": out }))
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> CliResult<T> {
    let p = dir.join(name);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| CliError::Report(format!("{}: {e}", p.display())))
}

/// Identification of a trained theory student against its teacher.
pub fn identification(dir: &Path, tol: f64) -> CliResult<Value> {
    let teacher: TeacherParams = read_json(dir, "teacher.json")?;
    let student: TeacherParams = read_json(dir, "student.json")?;
    let fit: LinearMapFit = read_json(dir, "latent_fit.json")?;
    let report = if student.h == teacher.h {
        let r = check_linear_identification(&teacher, &student, &fit.f, tol)?;
        json!({ "mode": "equal_width", "found": r.found, "residual": r.residual, "report": r })
    } else {
        let r = check_wider_identification(&teacher, &student, &fit.f, tol)?;
        json!({ "mode": "wider", "found": r.found, "residual": r.residual, "report": r })
    };
    Ok(json!({
        "check": "identification",
        "run": dir.display().to_string(),
        "tol": tol,
        "latent_fit_rank": fit.rank,
        "result": report,
    }))
}
