//! End-to-end checks for the distillation loop: hand-computed guidance
//! arithmetic through a fixed-uniform rng, finite-difference oracles showing
//! the guidance target is detached, exact round and evaluation counting, and
//! a bit-level reduction to plain distillation when alignment and the
//! adversarial and guidance terms are switched off.

use flowdistill::data::{ConditionMode, DatasetSpec, Family, MixtureComponent};
use flowdistill::distill::{
    dmd_generator_loss, fake_denoise_loss, isg_loss, sample_logit_normal, train, write_track_csv,
    write_train_csv, NetOnTape, TapeVelocity, TrainConfig,
};
use flowdistill::ndgrad::{
    finite_difference_gradient, grad, AdamW, ParamVector, Tape, Tensor, Var,
};
use flowdistill::nets::{generator_step, load_params, NetConfig, VelocityNet};
use flowdistill::samplers::{backward_simulate, CoarseGrid, VelocityField};
use flowdistill::schedules::{forward_diffuse, Schedule};
use flowdistill::theorylab::{check_recursions, TheoryConstants};
use flowdistill::Result;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Returns the same uniform on every `gen::<f64>()` call, through the
/// standard 53-bit mantissa conversion, so a test can recover the exact
/// value a loss function saw when it drew a time.
struct FixedU01 {
    bits: u64,
}

impl FixedU01 {
    fn new(u: f64) -> Self {
        assert!((0.0..1.0).contains(&u));
        FixedU01 { bits: ((u * (1u64 << 53) as f64) as u64) << 11 }
    }

    fn exact(&self) -> f64 {
        (self.bits >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl RngCore for FixedU01 {
    fn next_u32(&mut self) -> u32 {
        (self.bits >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.bits
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for b in dest.iter_mut() {
            *b = 0;
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// v(x) = x, both as a plain field and on the tape. Every Euler step from a
/// to b multiplies the state by 1 + (b - a), which makes multi-hop
/// compositions checkable by hand.
struct RadialField;

impl VelocityField for RadialField {
    fn velocity_batch(&self, x: &Tensor, _t: f64, _conds: &[usize]) -> Result<Tensor> {
        Ok(x.clone())
    }
}

impl TapeVelocity for RadialField {
    fn velocity_tape(
        &self,
        _tape: &mut Tape,
        x: Var,
        _ts: &[f64],
        _conds: &[usize],
    ) -> Result<Var> {
        Ok(x)
    }
}

/// Constant velocity field c, plain and on the tape.
struct DriftField([f64; 2]);

impl DriftField {
    fn rows(&self, n: usize) -> Result<Tensor> {
        Tensor::matrix(n, 2, (0..n).flat_map(|_| [self.0[0], self.0[1]]).collect())
    }
}

impl VelocityField for DriftField {
    fn velocity_batch(&self, x: &Tensor, _t: f64, _conds: &[usize]) -> Result<Tensor> {
        self.rows(x.rows())
    }
}

impl TapeVelocity for DriftField {
    fn velocity_tape(&self, tape: &mut Tape, x: Var, _ts: &[f64], _conds: &[usize]) -> Result<Var> {
        let n = tape.value(x).rows();
        Ok(tape.constant(self.rows(n)?))
    }
}

fn small_net_config() -> NetConfig {
    NetConfig { width: 8, depth: 2, time_embed_dim: 4, cond_embed_dim: 2, n_conditions: 1 }
}

fn unit_gaussian_data() -> Result<DatasetSpec> {
    DatasetSpec::new(
        Family::GaussianMixture {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: [0.0, 0.0],
                cov: [[1.0, 0.0], [0.0, 1.0]],
            }],
        },
        ConditionMode::Unconditional,
    )
}

fn tiny_world() -> Result<(NetConfig, DatasetSpec, VelocityNet, Schedule)> {
    let cfg = small_net_config();
    let data = unit_gaussian_data()?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let teacher = VelocityNet::new(cfg.clone(), &mut rng)?;
    Ok((cfg, data, teacher, Schedule::fm_ot()))
}

fn tiny_config(iters: usize) -> TrainConfig {
    TrainConfig {
        iters,
        batch: 16,
        ttur_f: 5,
        eval_every: 20,
        track_samples: 8,
        disc_backbone_width: 16,
        disc_head_dim: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn two_hop_guidance_matches_hand_euler_arithmetic() -> Result<()> {
    let grid = CoarseGrid::default_four();
    let x_tau = Tensor::matrix(2, 2, vec![1.2, -0.7, 0.4, 2.0])?;
    let mut rng = FixedU01::new(0.6);
    let t_mid = 0.75 + 0.25 * rng.exact();

    let mut tape = Tape::new();
    let loss = isg_loss(
        &mut tape,
        &RadialField,
        &RadialField,
        &RadialField,
        &x_tau,
        3,
        &grid,
        &[0, 0],
        &mut rng,
    )?;
    let got = tape.value(loss).data()[0];

    // Teacher from 1 down to t_mid, generator from t_mid to 0.75, against
    // the direct hop from 1 to 0.75, replayed with the same operations.
    let mut row_sums = [0.0; 2];
    for (i, sum) in row_sums.iter_mut().enumerate() {
        for d in 0..2 {
            let x = x_tau.row(i)[d];
            let x_mid = x + (t_mid - 1.0) * x;
            let x_tar = x_mid + (0.75 - t_mid) * x_mid;
            let x_pred = x + (0.75 - 1.0) * x;
            *sum += (x_pred - x_tar) * (x_pred - x_tar);
        }
    }
    let replay = (row_sums[0] + row_sums[1]) / 2.0;
    assert!((got - replay).abs() < 1e-15, "replayed {replay}, loss reported {got}");

    // Closed form: both hops scale the state, so the per-row discrepancy is
    // (0.75 - t_mid (1.75 - t_mid)) times the row.
    let gap = 0.75 - t_mid * (1.75 - t_mid);
    let norms: f64 = (0..2)
        .map(|i| x_tau.row(i)[0].powi(2) + x_tau.row(i)[1].powi(2))
        .sum::<f64>()
        / 2.0;
    let formula = gap * gap * norms;
    assert!((got - formula).abs() < 1e-12 * formula.max(1.0));
    Ok(())
}

#[test]
fn guidance_loss_vanishes_for_a_constant_field() -> Result<()> {
    let grid = CoarseGrid::default_four();
    let field = DriftField([0.4, -0.9]);
    let x_tau = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 4.0, -1.1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let loss =
        isg_loss(&mut tape, &field, &field, &field, &x_tau, 2, &grid, &[0, 0, 0], &mut rng)?;
    let got = tape.value(loss).data()[0];
    assert!(got < 1e-30, "constant field should make the two routes agree, got {got}");
    Ok(())
}

#[test]
fn guidance_target_carries_no_gradient() -> Result<()> {
    let cfg = small_net_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let generator = VelocityNet::new(cfg.clone(), &mut rng)?;
    let teacher = VelocityNet::new(cfg.clone(), &mut rng)?;
    let grid = CoarseGrid::default_four();
    let n = 4;
    let x_tau = Tensor::matrix(
        n,
        2,
        (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let conds = vec![0usize; n];

    let (_, g_tape) = grad(
        |tape, params| {
            let on_tape = NetOnTape { cfg: &cfg, params };
            isg_loss(
                tape,
                &on_tape,
                &generator,
                &teacher,
                &x_tau,
                3,
                &grid,
                &conds,
                &mut FixedU01::new(0.37),
            )
        },
        generator.params(),
    )?;

    // Rebuild the frozen target with the same midpoint the loss drew.
    let t_mid = 0.75 + 0.25 * FixedU01::new(0.37).exact();
    let v_teacher = teacher.forward(&x_tau, &vec![1.0; n], &conds)?;
    let x_mid = x_tau.zip_map(&v_teacher, "test", |x, v| x + (t_mid - 1.0) * v)?;
    let v_mid = generator.forward(&x_mid, &vec![t_mid; n], &conds)?;
    let x_tar = x_mid.zip_map(&v_mid, "test", |x, v| x + (0.75 - t_mid) * v)?;

    let frozen = |p: &ParamVector| -> Result<f64> {
        let probe = VelocityNet::from_params(cfg.clone(), p.clone())?;
        let v = probe.forward(&x_tau, &vec![1.0; n], &conds)?;
        let mut acc = 0.0;
        for i in 0..n {
            for d in 0..2 {
                let pred = x_tau.row(i)[d] - 0.25 * v.row(i)[d];
                let gap = pred - x_tar.row(i)[d];
                acc += gap * gap;
            }
        }
        Ok(acc / n as f64)
    };
    let fd_frozen = finite_difference_gradient(frozen, generator.params(), 1e-5)?;

    // Same objective but with the target recomputed under the probe, which
    // is what the gradient would see if the target were not detached.
    let live = |p: &ParamVector| -> Result<f64> {
        let probe = VelocityNet::from_params(cfg.clone(), p.clone())?;
        let v_mid_p = probe.forward(&x_mid, &vec![t_mid; n], &conds)?;
        let x_tar_p = x_mid.zip_map(&v_mid_p, "test", |x, v| x + (0.75 - t_mid) * v)?;
        let v = probe.forward(&x_tau, &vec![1.0; n], &conds)?;
        let mut acc = 0.0;
        for i in 0..n {
            for d in 0..2 {
                let pred = x_tau.row(i)[d] - 0.25 * v.row(i)[d];
                let gap = pred - x_tar_p.row(i)[d];
                acc += gap * gap;
            }
        }
        Ok(acc / n as f64)
    };
    let fd_live = finite_difference_gradient(live, generator.params(), 1e-5)?;

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = |a: &ParamVector, b: &ParamVector| {
        a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let scale = norm(g_tape.flat()).max(1e-12);
    let rel_frozen = diff(&g_tape, &fd_frozen) / scale;
    let rel_live = diff(&g_tape, &fd_live) / scale;
    assert!(rel_frozen < 1e-4, "frozen-target oracle disagrees: rel {rel_frozen}");
    assert!(
        rel_live > 10.0 * rel_frozen.max(1e-9),
        "live-target oracle should differ: frozen {rel_frozen}, live {rel_live}"
    );
    Ok(())
}

#[test]
fn logit_normal_times_center_on_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let n = 100_000;
    let draws: Vec<f64> =
        (0..n).map(|_| sample_logit_normal(0.0, 1.0, 1e-3, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - 0.5).abs() < 3.0 * se,
        "mean {mean} is more than 3 standard errors from 0.5 (se {se})"
    );
}

#[test]
fn training_counts_rounds_and_evaluations_exactly() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = tiny_config(40);
    let out = train(&tc, &teacher, &data, &schedule, None)?;

    assert_eq!(out.log.losses.len(), 40);
    assert_eq!(out.log.records.len(), 8, "40 iterations at ttur 5 give 8 generator rounds");
    for (i, rec) in out.log.records.iter().enumerate() {
        assert_eq!(rec.k, i + 1);
    }
    let eval_iters: Vec<usize> = out.log.evals.iter().map(|e| e.iter).collect();
    assert_eq!(eval_iters, vec![0, 20, 40]);
    for l in &out.log.losses {
        assert!(l.l_dmd.is_finite());
        assert!(l.l_fake_denoise.is_finite());
        assert!(l.l_disc.is_finite());
    }
    Ok(())
}

#[test]
fn alignment_contracts_the_tracking_distance_every_round() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = tiny_config(40);
    let out = train(&tc, &teacher, &data, &schedule, None)?;

    for rec in &out.log.records {
        let bound = tc.lambda_ida * (rec.e_pre_k + rec.theta_step);
        assert!(
            rec.e_k <= bound + 1e-10,
            "round {}: e_k {} exceeds lambda (e_pre + step) = {}",
            rec.k,
            rec.e_k,
            bound
        );
    }
    let constants = TheoryConstants { l: 1.0, c_v: 1.0, c_vhat: 1.0 };
    let report = check_recursions(&out.log.records, tc.lambda_ida, &constants)?;
    assert_eq!(report.pass_fraction[0], 1.0);
    Ok(())
}

#[test]
fn identical_seeds_produce_identical_parameters_and_logs() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = tiny_config(20);
    let a = train(&tc, &teacher, &data, &schedule, None)?;
    let b = train(&tc, &teacher, &data, &schedule, None)?;

    assert_eq!(a.generator.params().flat(), b.generator.params().flat());
    assert_eq!(a.fake.params().flat(), b.fake.params().flat());

    let dir = tempfile::tempdir().expect("tempdir");
    let paths = [
        dir.path().join("a_train.csv"),
        dir.path().join("b_train.csv"),
        dir.path().join("a_track.csv"),
        dir.path().join("b_track.csv"),
    ];
    write_train_csv(&a.log, tc.ttur_f, &paths[0])?;
    write_train_csv(&b.log, tc.ttur_f, &paths[1])?;
    write_track_csv(&a.log, tc.ttur_f, &paths[2])?;
    write_track_csv(&b.log, tc.ttur_f, &paths[3])?;
    let read = |p: &std::path::Path| std::fs::read(p).expect("read csv");
    assert_eq!(read(&paths[0]), read(&paths[1]));
    assert_eq!(read(&paths[2]), read(&paths[3]));
    Ok(())
}

#[test]
fn reduction_to_plain_distillation_is_bit_identical() -> Result<()> {
    let (net_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = TrainConfig {
        lambda_ida: 1.0,
        lambda_isg: 0.0,
        lambda_g: 0.0,
        iters: 20,
        batch: 8,
        ttur_f: 5,
        eval_every: 1000,
        track_samples: 4,
        disc_backbone_width: 16,
        disc_head_dim: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(&tc, &teacher, &data, &schedule, None)?;

    // Plain distillation reference: matching loss for the generator every
    // ttur_f-th iteration, denoising for the fake model every iteration,
    // drawing from the algorithm stream in the same order. With the blend
    // factor at 1 the alignment step is the identity, and with a zero
    // adversarial weight the discriminator never touches either network, so
    // the two trajectories must agree bit for bit.
    let grid = CoarseGrid::new(tc.anchors.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(11);
    let mut generator = VelocityNet::from_params(net_cfg.clone(), teacher.params().clone())?;
    let mut fake = VelocityNet::from_params(net_cfg.clone(), teacher.params().clone())?;
    let mut opt_g = AdamW::new(generator.params().len());
    let mut opt_fake = AdamW::new(fake.params().len());

    fn std_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
        Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    }

    for k in 0..tc.iters {
        let idx = rng.gen_range(0..grid.len());
        let tau_i = grid.anchors()[idx];
        let (x0_real, conds_tau) = data.sample_batch(tc.batch, &mut rng)?;
        let (_x_ref, _) = data.sample_batch(tc.batch, &mut rng)?;
        let (_x_real_d, _conds_d) = data.sample_batch(tc.batch, &mut rng)?;
        let coin: f64 = rng.gen();
        let x_tau = if coin < tc.backward_sim_prob {
            let z = std_matrix(tc.batch, &mut rng)?;
            backward_simulate(&generator, &grid, &z, tau_i, &conds_tau, &mut rng)?
        } else {
            let eps = std_matrix(tc.batch, &mut rng)?;
            forward_diffuse(&schedule, &x0_real, tau_i, &eps)?
        };
        let x_hat0_plain = generator_step(&generator, &x_tau, tau_i, 0.0, &conds_tau)?;

        if (k + 1) % tc.ttur_f == 0 {
            let (_, g_grad) = {
                let fake_ref = &fake;
                let teacher_ref = &teacher;
                let rng_ref = &mut rng;
                grad(
                    |tape, params| {
                        let x_tau_var = tape.constant(x_tau.clone());
                        let v = VelocityNet::forward_tape(
                            &net_cfg,
                            tape,
                            params,
                            x_tau_var,
                            &vec![tau_i; tc.batch],
                            &conds_tau,
                        )?;
                        let step = tape.scale(v, -tau_i)?;
                        let x_hat0 = tape.add(x_tau_var, step)?;
                        dmd_generator_loss(
                            tape,
                            x_hat0,
                            fake_ref,
                            teacher_ref,
                            &schedule,
                            &conds_tau,
                            rng_ref,
                        )
                    },
                    generator.params(),
                )?
            };
            opt_g.step(generator.params_mut(), &g_grad, tc.lr_g)?;
        }

        let (_, f_grad) = {
            let rng_ref = &mut rng;
            let fake_cfg = fake.config().clone();
            grad(
                |tape, params| {
                    fake_denoise_loss(
                        tape,
                        &fake_cfg,
                        params,
                        &x_hat0_plain,
                        &schedule,
                        tc.logitnormal_mu,
                        tc.logitnormal_sigma,
                        &conds_tau,
                        rng_ref,
                    )
                },
                fake.params(),
            )?
        };
        opt_fake.step(fake.params_mut(), &f_grad, tc.lr_fake)?;
    }

    assert_eq!(out.generator.params().flat(), generator.params().flat());
    assert_eq!(out.fake.params().flat(), fake.params().flat());
    Ok(())
}

#[test]
fn zero_adversarial_weight_isolates_the_discriminator() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let base = TrainConfig {
        lambda_g: 0.0,
        iters: 15,
        batch: 8,
        ttur_f: 5,
        eval_every: 1000,
        track_samples: 4,
        disc_backbone_width: 16,
        disc_head_dim: 4,
        seed: 21,
        ..TrainConfig::default()
    };
    let wide = TrainConfig { disc_backbone_width: 32, ..base.clone() };

    let a = train(&base, &teacher, &data, &schedule, None)?;
    let b = train(&wide, &teacher, &data, &schedule, None)?;
    assert_eq!(a.generator.params().flat(), b.generator.params().flat());
    assert_eq!(a.fake.params().flat(), b.fake.params().flat());
    Ok(())
}

#[test]
fn runaway_learning_rate_reports_the_diverging_component() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = TrainConfig { lr_g: 1e12, iters: 10, ..tiny_config(10) };
    let msg = match train(&tc, &teacher, &data, &schedule, None) {
        Ok(_) => panic!("training should diverge at this learning rate"),
        Err(e) => e.to_string(),
    };
    assert!(msg.contains("diverged at iteration"), "unexpected error: {msg}");
    Ok(())
}

#[test]
fn checkpoints_round_trip_through_the_run_directory() -> Result<()> {
    let (_cfg, data, teacher, schedule) = tiny_world()?;
    let tc = tiny_config(6);
    let dir = tempfile::tempdir().expect("tempdir");
    let out = train(&tc, &teacher, &data, &schedule, Some(dir.path()))?;

    let mid = load_params(&dir.path().join("generator_mid.params"))?;
    assert_eq!(mid.len(), out.generator.params().len());

    let final_g = load_params(&dir.path().join("generator_final.params"))?;
    assert_eq!(final_g.flat(), out.generator.params().flat());
    let final_f = load_params(&dir.path().join("fake_final.params"))?;
    assert_eq!(final_f.flat(), out.fake.params().flat());
    Ok(())
}
