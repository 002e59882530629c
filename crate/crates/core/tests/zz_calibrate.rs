//! Scratch calibration experiments (ignored by default; run explicitly).

use std::sync::Arc;
use std::time::Instant;

use anypoint_core::config::{AppConfig, TrackerConfig, TrainConfig, WorldConfig};
use anypoint_core::metrics::evaluate_sequence;
use anypoint_core::model::Model;
use anypoint_core::synthworld::generate_sequence;
use anypoint_core::tracker::track_sequence;
use anypoint_core::training::train_stage1;

fn overfit_world(seed: u64) -> WorldConfig {
    WorldConfig {
        num_sprites: 3,
        frame_size: 64,
        video_length: 24,
        num_points: 6,
        occlusion_rate: 0.25,
        cut_probability: 0.0,
        max_speed: 2.0,
        seed,
        ..Default::default()
    }
}

fn corpus(n: usize, base: u64) -> Vec<anypoint_core::synthworld::SyntheticSequence> {
    (0..n)
        .map(|i| generate_sequence(&overfit_world(base + i as u64)).unwrap())
        .collect()
}

fn eval_train_set(
    model: &Arc<Model>,
    corpus: &[anypoint_core::synthworld::SyntheticSequence],
    tcfg: &TrackerConfig,
) -> (f64, f64, f64) {
    let mut aj = 0.0;
    let mut davg = 0.0;
    let mut oa = 0.0;
    for seq in corpus {
        let records = track_sequence(model.clone(), tcfg, seq).unwrap();
        let rep = evaluate_sequence(&records, seq).unwrap();
        aj += rep.aj / corpus.len() as f64;
        davg += rep.delta_avg / corpus.len() as f64;
        oa += rep.oa / corpus.len() as f64;
    }
    (aj, davg, oa)
}

#[test]
#[ignore]
fn time_one_iteration() {
    let cfg = AppConfig::default();
    let data = corpus(2, 300);
    let mut model = Model::new(&cfg.model, 1).unwrap();
    let tc = TrainConfig { iterations: 3, batch: 2, grad_accum: 1, points_per_seq: 6, ..Default::default() };
    let start = Instant::now();
    train_stage1(&mut model, &data, &tc).unwrap();
    println!("3 iterations (batch 2): {:?}", start.elapsed());
}

#[test]
#[ignore]
fn overfit_run() {
    let iterations: usize = std::env::var("ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let cfg = AppConfig::default();
    let data = corpus(8, 300);
    let mut model = Model::new(&cfg.model, 1).unwrap();
    let tc = TrainConfig {
        iterations,
        batch: 2,
        grad_accum: 1,
        lr,
        points_per_seq: 6,
        log_every: 25,
        ..Default::default()
    };
    let start = Instant::now();
    let out = train_stage1(&mut model, &data, &tc).unwrap();
    println!("trained {} iters in {:?}", iterations, start.elapsed());
    for row in &out.curves {
        println!(
            "iter {:4}  loc {:8.4}  vis {:7.4}  total {:8.4}",
            row.iteration, row.location_loss, row.visibility_loss, row.total
        );
    }
    let tcfg = TrackerConfig { rebase: anypoint_core::config::RebasePolicy::Off, ..Default::default() };
    let arc = Arc::new(model);
    let (aj, davg, oa) = eval_train_set(&arc, &data, &tcfg);
    println!("train set: AJ {aj:.1}  delta_avg {davg:.1}  OA {oa:.1}");
}

#[test]
#[ignore]
fn probe_grads() {
    use anypoint_core::autodiff::Tape;
    use anypoint_core::training::{forward_sequence, ForwardOptions, LossScope};
    use anypoint_core::vlta::VltaOptions;
    let cfg = AppConfig::default();
    let data = corpus(1, 300);
    let model = Model::new(&cfg.model, 1).unwrap();
    let opts = ForwardOptions {
        points: vec![0, 1, 2, 3, 4, 5],
        vlta: VltaOptions::default(),
        mask_invisible: true,
        aux_loss: true,
        vis_loss_weight: 1.0,
        loss_scope: LossScope::Full,
        rebase_on_cuts: false,
        loss_scale: 1.0,
    };
    let tape = Tape::new();
    let out = forward_sequence(&tape, &model, &data[0], &opts).unwrap();
    println!("loss {:.4} loc {:.4} vis {:.4}", tape.scalar(out.loss), out.location, out.visibility);
    let grads = tape.backward(out.loss);
    let mut total_norm = 0.0;
    for (name, g) in &grads {
        let n: f64 = g.iter().map(|v| v * v).sum::<f64>();
        total_norm += n;
        if name.starts_with("vis.") || name.contains("off.w2") || name.contains("conv1") || name.contains("sim.w1") {
            println!("{name}: norm {:.6e} max {:.3e}", n.sqrt(), g.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
        }
    }
    println!("global grad norm: {:.4e}", total_norm.sqrt());
}
