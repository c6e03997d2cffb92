use flowdistill::harness::{read_csv, ExperimentConfig};
use flowdistill::metrics::step_consistency;
use flowdistill::ndgrad::{ParamVector, Tensor};
use flowdistill::nets::{load_params, VelocityNet};
use flowdistill::samplers::{stochastic_anchor_sample, CoarseGrid};
use flowdistill::theorylab::{check_recursions, estimate_constants, TrackRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

fn trace_from_csv(dir: &Path) -> flowdistill::Result<Vec<TrackRecord>> {
    let t = read_csv(&dir.join("track.csv"))?;
    let k = t.column("k")?;
    let e_pre = t.column("e_pre_k")?;
    let e_k = t.column("e_k")?;
    let step = t.column("theta_step")?;
    let delta = t.column("delta_k")?;
    let dbar = t.column("dbar_k")?;
    let betabar = t.column("betabar_k")?;
    let dtilde = t.column("dtilde_k")?;
    let betatilde = t.column("betatilde_k")?;
    let eps = t.column("eps_k")?;
    let kl_gf = t.column("kl_gf")?;
    let kl_gr = t.column("kl_gr")?;
    Ok((0..k.len())
        .map(|i| TrackRecord {
            k: k[i] as usize,
            e_pre_k: e_pre[i],
            e_k: e_k[i],
            delta_k: delta[i],
            dbar_k: dbar[i],
            betabar_k: betabar[i],
            dtilde_k: dtilde[i],
            betatilde_k: betatilde[i],
            eps_k: eps[i],
            kl_gf: kl_gf[i],
            kl_gr: kl_gr[i],
            theta_step: step[i],
            proxy: true,
        })
        .collect())
}

fn percentiles(mut v: Vec<f64>, name: &str) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
    println!(
        "{name}: p50={:.4} p90={:.4} p95={:.4} p99={:.4} max={:.4}",
        q(0.5),
        q(0.9),
        q(0.95),
        q(0.99),
        v[v.len() - 1]
    );
}

fn eval_points(
    gen: &VelocityNet,
    schedule: &flowdistill::schedules::Schedule,
    rng: &mut ChaCha8Rng,
) -> flowdistill::Result<(Vec<(f64, Tensor)>, Vec<usize>)> {
    let n = 256;
    let n_cond = gen.config().n_conditions;
    let conds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_cond)).collect();
    let grid = CoarseGrid::default_four();
    let z = Tensor::matrix(n, 2, (0..n * 2).map(|_| rng.sample(StandardNormal)).collect())?;
    let x0 = stochastic_anchor_sample(gen, &grid, &z, &conds, rng)?;
    let mut pts = Vec::new();
    for i in 0..16 {
        let t = schedule.t_min() + (1.0 - schedule.t_min()) * i as f64 / 15.0;
        let noise =
            Tensor::matrix(n, 2, (0..n * 2).map(|_| rng.sample(StandardNormal)).collect())?;
        let xt = flowdistill::schedules::forward_diffuse(schedule, &x0, t, &noise)?;
        pts.push((t, xt));
    }
    Ok((pts, conds))
}

fn field_gap(
    gen: &VelocityNet,
    pa: &ParamVector,
    pb: &ParamVector,
    pts: &[(f64, Tensor)],
    conds: &[usize],
) -> flowdistill::Result<f64> {
    let cfg = gen.config().clone();
    let na = VelocityNet::from_params(cfg.clone(), pa.clone())?;
    let nb = VelocityNet::from_params(cfg, pb.clone())?;
    let mut gap_sum = 0.0;
    let mut count = 0usize;
    for (t, x) in pts {
        let va = na.forward(x, &vec![*t; x.rows()], &conds[..x.rows()])?;
        let vb = nb.forward(x, &vec![*t; x.rows()], &conds[..x.rows()])?;
        for i in 0..x.rows() {
            let dx = va.row(i)[0] - vb.row(i)[0];
            let dy = va.row(i)[1] - vb.row(i)[1];
            gap_sum += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    Ok(gap_sum / count as f64)
}

fn param_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn probe_one_dir(dir: &Path) -> flowdistill::Result<()> {
    println!("==== {} ====", dir.display());
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let lam = cfg.train.lambda_ida;
    let trace = trace_from_csv(dir)?;
    println!("records: {}  lambda_ida {}  lambda_isg {}", trace.len(), lam, cfg.train.lambda_isg);

    let mut req2 = Vec::new();
    for w in trace.windows(2) {
        let cur = &w[1];
        let denom = lam * cur.e_pre_k + (2.0 - lam) * cur.theta_step;
        req2.push(cur.delta_k / denom);
    }
    percentiles(req2, "required L for field-gap bound (C_v = L)");

    let gen =
        VelocityNet::from_params(cfg.net.clone(), load_params(&dir.join("generator_final.params"))?)?;
    let fake = load_params(&dir.join("fake_final.params"))?;
    let schedule = cfg.schedule.build()?;

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let (pts, conds) = eval_points(&gen, &schedule, &mut rng)?;

    let d_tf = param_dist(gen.params(), &fake);
    let g_tf = field_gap(&gen, gen.params(), &fake, &pts, &conds)?;
    println!(
        "trained-direction slope theta vs phi: dist={:.4} gap={:.4} slope={:.4}",
        d_tf,
        g_tf,
        g_tf / d_tf
    );

    let layout = gen.params().layout_arc();
    let mut overall: f64 = 0.0;
    for (bi, entry) in layout.entries().iter().enumerate() {
        let (lo, hi) = layout.range(bi);
        let mut worst: f64 = 0.0;
        for _ in 0..4 {
            let mut a = gen.params().flat().to_vec();
            let mut b = gen.params().flat().to_vec();
            for i in lo..hi {
                a[i] += 0.05 * rng.sample::<f64, _>(StandardNormal);
                b[i] += 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
            let pa = ParamVector::from_flat(layout.clone(), a)?;
            let pb = ParamVector::from_flat(layout.clone(), b)?;
            let dist = param_dist(&pa, &pb);
            let gap = field_gap(&gen, &pa, &pb, &pts, &conds)?;
            worst = worst.max(gap / dist);
        }
        if worst > 0.2 {
            println!("  block {:24} len {:5} ratio {:.4}", entry.name, hi - lo, worst);
        }
        overall = overall.max(worst);
    }
    println!("block-restricted max ratio {:.4} -> L = {:.4}", overall, 2.0 * overall);

    for (scale, probes) in [(0.05, 8), (0.2, 8), (0.5, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let consts = estimate_constants(&gen, &schedule, scale, probes, &mut rng)?;
        let rep = check_recursions(&trace, lam, &consts)?;
        println!(
            "scale {scale} probes {probes}: L={:.4} C_vhat={:.4} fractions={:?}",
            consts.l, consts.c_vhat, rep.pass_fraction
        );
    }

    let train = read_csv(&dir.join("train.csv"))?;
    let fd = train.column("fd_to_teacher")?;
    let tail: Vec<f64> = fd.iter().rev().take(5).copied().collect();
    println!("fd_to_teacher last 5: {:?}", tail);

    let mut rng2 = ChaCha8Rng::seed_from_u64(909);
    let (_, dconds) = cfg.dataset.sample_batch(1024, &mut rng2)?;
    for counts in [[4usize, 8], [4, 16], [8, 16]] {
        let drift = step_consistency(&gen, &CoarseGrid::default_four(), &counts, &dconds, &[0])?;
        println!("drift {:?}", drift);
    }
    Ok(())
}

fn main() -> flowdistill::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dirs: Vec<String> = if args.is_empty() {
        vec!["/tmp/bench/out/distill/seed-0".to_string()]
    } else {
        args
    };
    for d in dirs {
        probe_one_dir(Path::new(&d))?;
    }
    Ok(())
}
