//! Scratch probe for picking acceptance-scale epoch counts. Not shipped.

use std::time::Instant;

use modfuse::data::ridge_probe;
use modfuse::harness::{
    extract_parts, run_distill_fold, train_teacher, ExperimentConfig, MissingSpec,
};
use modfuse::model::Ablation;
use rayon::prelude::*;

fn env_f64(name: &str) -> Option<f64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn base(teacher_epochs: usize, student_epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        teacher_epochs,
        student_epochs,
        ..ExperimentConfig::default()
    };
    if let Some(v) = env_f64("TUNE_OMI") {
        cfg.omega_mi = v;
    }
    if let Some(v) = env_f64("TUNE_OPROX") {
        cfg.omega_prox = v;
    }
    if let Some(v) = env_f64("TUNE_QLR") {
        cfg.q_lr = v;
    }
    if let Some(v) = env_f64("TUNE_LR") {
        cfg.lr = v;
    }
    cfg
}

fn probe_r2(
    feats: &[Vec<f64>],
    targets: &[Vec<f64>],
    train: &[usize],
    test: &[usize],
) -> f64 {
    ridge_probe(feats, targets, train, test, 1.0).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("time");
    match mode {
        // one default-scale unit, timed
        "time" => {
            let te: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let se: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
            let mut cfg = base(te, se);
            cfg.missing = MissingSpec::Oct;
            let t0 = Instant::now();
            let run = run_distill_fold(&cfg, 0, 0).unwrap();
            println!(
                "unit te={te} se={se}: {:.1}s acc={:.4}",
                t0.elapsed().as_secs_f64(),
                run.metrics.acc
            );
        }
        // teacher-only diagnostics: loss curves + teacher accuracy
        "teacher" => {
            let te: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let mut cfg = base(te, 0);
            if let Some(p) = args.get(3) {
                cfg.preset = Ablation::parse(p).unwrap();
            }
            if let Some(lr) = args.get(4).and_then(|s| s.parse().ok()) {
                cfg.lr = lr;
            }
            if let Some(q_lr) = args.get(5).and_then(|s| s.parse().ok()) {
                cfg.q_lr = q_lr;
            }
            if let Some(om) = args.get(6).and_then(|s| s.parse().ok()) {
                cfg.omega_mi = om;
            }
            let t0 = Instant::now();
            let mut run = train_teacher(&cfg, 0, 0).unwrap();
            println!("trained in {:.0}s", t0.elapsed().as_secs_f64());
            for c in &run.curves {
                let vals: Vec<f64> =
                    c.values.iter().map(|v| (v * 1000.0).round() / 1000.0).collect();
                println!("{}: {:?}", c.term, vals);
            }
            let (preds, _) = modfuse::harness::predict(
                &mut run.model,
                &run.dataset.samples,
                &run.test,
                cfg.preset,
                256,
            )
            .unwrap();
            let labels: Vec<usize> =
                run.test.iter().map(|&i| run.dataset.samples[i].label).collect();
            let acc = modfuse::metrics::accuracy(&preds, &labels).unwrap();
            let (tp, _) = modfuse::harness::predict(
                &mut run.model,
                &run.dataset.samples,
                &run.train,
                cfg.preset,
                256,
            )
            .unwrap();
            let tl: Vec<usize> =
                run.train.iter().map(|&i| run.dataset.samples[i].label).collect();
            let tacc = modfuse::metrics::accuracy(&tp, &tl).unwrap();
            println!("teacher train acc {tacc:.4} test acc {acc:.4}");

            // eval-mode proxy-selection accuracy per modality on the test set
            if cfg.preset.uses_proxy_joint() {
                use modfuse::model::{ForwardBatch, ForwardOpts, Modality};
                use modfuse::nn::ParamRegistry;
                let mut hits = [0usize; 2];
                let mut total = 0usize;
                for chunk in run.test.chunks(256) {
                    let x_f = modfuse::data::stack_modality(
                        &run.dataset.samples,
                        chunk,
                        Modality::Fundus,
                    )
                    .unwrap();
                    let x_o = modfuse::data::stack_modality(
                        &run.dataset.samples,
                        chunk,
                        Modality::Oct,
                    )
                    .unwrap();
                    let tape = modfuse::Tape::new();
                    let mut reg = ParamRegistry::new(&tape);
                    let vars = run.model.bind(&mut reg, false);
                    let fb = ForwardBatch {
                        x_f: x_f.as_ref(),
                        x_o: x_o.as_ref(),
                        labels: None,
                        batch: chunk.len(),
                    };
                    let out = run
                        .model
                        .forward(
                            &tape,
                            &vars,
                            &fb,
                            &ForwardOpts { preset: cfg.preset, epsilon: None },
                        )
                        .unwrap();
                    for (mi, pooled) in [(0, &out.pooled_f), (1, &out.pooled_o)] {
                        let t = pooled.to_tensor();
                        for (r, &si) in chunk.iter().enumerate() {
                            let row: Vec<f64> =
                                t.data()[r * t.shape()[1]..(r + 1) * t.shape()[1]].to_vec();
                            let sel = run
                                .model
                                .proxies
                                .select_positive(&row, mi, None)
                                .unwrap();
                            if sel.class == run.dataset.samples[si].label {
                                hits[mi] += 1;
                            }
                        }
                    }
                    total += chunk.len();
                }
                println!(
                    "proxy selection acc: fundus {:.4} oct {:.4}",
                    hits[0] as f64 / total as f64,
                    hits[1] as f64 / total as f64
                );
            }
        }
        // criterion 5 probes at several teacher epoch counts
        "probe" => {
            let te: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let seeds: Vec<u64> = vec![0, 1, 2];
            let preset = args
                .get(3)
                .map(|p| Ablation::parse(p).unwrap())
                .unwrap_or(Ablation::Full);
            let rows: Vec<String> = seeds
                .par_iter()
                .map(|&seed| {
                    let mut cfg = base(te, 0);
                    cfg.preset = preset;
                    let t0 = Instant::now();
                    let mut run = train_teacher(&cfg, seed, 0).unwrap();
                    let n = run.dataset.samples.len();
                    let all: Vec<usize> = (0..n).collect();
                    let parts = extract_parts(
                        &mut run.model,
                        &run.dataset.samples,
                        &all,
                        preset,
                        256,
                    )
                    .unwrap();
                    let lat = &run.dataset.latents;
                    let zs: Vec<Vec<f64>> = lat.iter().map(|l| l.shared.clone()).collect();
                    let zf: Vec<Vec<f64>> = lat.iter().map(|l| l.fundus.clone()).collect();
                    let zo: Vec<Vec<f64>> = lat.iter().map(|l| l.oct.clone()).collect();
                    let s_zs = probe_r2(&parts.s_hat, &zs, &run.train, &run.test);
                    let f_zf = probe_r2(&parts.r_f, &zf, &run.train, &run.test);
                    let f_zo = probe_r2(&parts.r_f, &zo, &run.train, &run.test);
                    let o_zo = probe_r2(&parts.r_o, &zo, &run.train, &run.test);
                    let o_zf = probe_r2(&parts.r_o, &zf, &run.train, &run.test);
                    let mi = run
                        .curves
                        .iter()
                        .find(|c| c.term == "teacher.mi" && !c.values.is_empty())
                        .map(|c| (c.values[0], *c.values.last().unwrap()))
                        .unwrap_or((f64::NAN, f64::NAN));
                    format!(
                        "seed {seed} te={te}: {:.0}s s->zs {s_zs:.3} | f->zf {f_zf:.3} f->zo {f_zo:.3} d {:.3} | o->zo {o_zo:.3} o->zf {o_zf:.3} d {:.3} | mi {:.4}->{:.4}",
                        t0.elapsed().as_secs_f64(),
                        f_zf - f_zo,
                        o_zo - o_zf,
                        mi.0,
                        mi.1
                    )
                })
                .collect();
            for r in rows {
                println!("{r}");
            }
        }
        // criterion 6 orderings at given epoch counts
        "ablate" => {
            let te: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let se: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
            let presets = [
                Ablation::RawJoint,
                Ablation::RawJointDe,
                Ablation::ProxyJoint,
                Ablation::Full,
            ];
            let seeds: Vec<u64> = vec![0, 1, 2, 3, 4];
            let t0 = Instant::now();
            let cells: Vec<((usize, u64), f64)> = presets
                .par_iter()
                .enumerate()
                .flat_map(|(pi, &preset)| {
                    seeds.par_iter().map(move |&seed| {
                        let mut cfg = base(te, se);
                        cfg.preset = preset;
                        cfg.missing = MissingSpec::Oct;
                        let run = run_distill_fold(&cfg, seed, 0).unwrap();
                        ((pi, seed), run.metrics.acc)
                    })
                })
                .collect();
            println!("wall {:.0}s", t0.elapsed().as_secs_f64());
            for (pi, preset) in presets.iter().enumerate() {
                let accs: Vec<f64> = cells
                    .iter()
                    .filter(|((p, _), _)| *p == pi)
                    .map(|(_, a)| *a)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                println!(
                    "{:>13} ({}): mean {:.4}  {:?}",
                    preset.name(),
                    preset.roman(),
                    mean,
                    accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
                );
            }
        }
        // criterion 7 alpha robustness at given epoch counts
        "alpha" => {
            let te: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let se: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
            let alphas = [0.1, 0.3, 0.5];
            let presets = [Ablation::RawJoint, Ablation::Full];
            let seeds: Vec<u64> = vec![0, 1, 2, 3, 4];
            let t0 = Instant::now();
            let mut jobs = Vec::new();
            for (pi, _) in presets.iter().enumerate() {
                for (ai, _) in alphas.iter().enumerate() {
                    for &seed in &seeds {
                        jobs.push((pi, ai, seed));
                    }
                }
            }
            let cells: Vec<((usize, usize), f64)> = jobs
                .par_iter()
                .map(|&(pi, ai, seed)| {
                    let mut cfg = base(te, se);
                    cfg.preset = presets[pi];
                    cfg.alpha = alphas[ai];
                    let run = run_distill_fold(&cfg, seed, 0).unwrap();
                    ((pi, ai), run.metrics.acc)
                })
                .collect();
            println!("wall {:.0}s", t0.elapsed().as_secs_f64());
            for (pi, preset) in presets.iter().enumerate() {
                let mut means = Vec::new();
                for ai in 0..alphas.len() {
                    let accs: Vec<f64> = cells
                        .iter()
                        .filter(|((p, a), _)| *p == pi && *a == ai)
                        .map(|(_, acc)| *acc)
                        .collect();
                    means.push(accs.iter().sum::<f64>() / accs.len() as f64);
                }
                println!(
                    "{:>10}: a0.1 {:.4} a0.3 {:.4} a0.5 {:.4} | degradation {:.4}",
                    preset.name(),
                    means[0],
                    means[1],
                    means[2],
                    means[0] - means[2]
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
