//! Scratch tool for tuning the ablation benchmark. Not part of the shipped
//! surface; run as
//! `cargo run --example calibrate -- seed=0 cap=8 beta=0.5 arms=base,mem`.

use cycleseg::data::{generate_phantom, PhantomConfig};
use cycleseg::metrics;
use cycleseg::network::NetworkConfig;
use cycleseg::ssl::{self, TrainingConfig};
use std::time::Instant;

fn main() {
    let mut seed = 0u64;
    let mut cap = 4usize;
    let mut beta = 1.0f64;
    let mut soft = false;
    let mut noise = 0.2f64;
    let mut steps = 1usize;
    let mut epochs = 30usize;
    let mut lr = 3e-3f64;
    let mut topk = 16usize;
    let mut ramp = 0.25f64;
    let mut sigma = 0.1f64;
    let mut arms = vec!["base".to_string(), "mem".to_string(), "topo".to_string()];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "seed" => seed = v.parse().unwrap(),
            "cap" => cap = v.parse().unwrap(),
            "beta" => beta = v.parse().unwrap(),
            "soft" => soft = v == "1",
            "noise" => noise = v.parse().unwrap(),
            "steps" => steps = v.parse().unwrap(),
            "epochs" => epochs = v.parse().unwrap(),
            "lr" => lr = v.parse().unwrap(),
            "topk" => topk = v.parse().unwrap(),
            "ramp" => ramp = v.parse().unwrap(),
            "sigma" => sigma = v.parse().unwrap(),
            "arms" => arms = v.split(',').map(|s| s.to_string()).collect(),
            other => panic!("unknown knob {other}"),
        }
    }
    println!(
        "probe: seed={seed} cap={cap} beta={beta} soft={soft} noise={noise} steps={steps} epochs={epochs} lr={lr} topk={topk} ramp={ramp} sigma={sigma}"
    );

    let cohort = generate_phantom(&PhantomConfig {
        grid_size: 16,
        n_phases: 8,
        n_patients: 36,
        seed,
        noise_level: noise,
        ..PhantomConfig::default()
    })
    .expect("phantom");
    let (train_set, rest) = cohort.split_at(24);
    let (_val, test_set) = rest.split_at(4);
    let net = NetworkConfig {
        base_channels: 4,
        n_levels: 3,
        key_channels: 4,
        value_channels: 8,
        readout_levels: vec![3],
    };

    for arm in &arms {
        // "memoff" trains with the banks but evaluates without them, to
        // separate training-time from read-time effects
        let (mcl, tcr, eval_mcl) = match arm.as_str() {
            "base" => (false, false, false),
            "mem" => (true, false, true),
            "memoff" => (true, false, false),
            "topo" => (true, true, true),
            other => panic!("unknown arm {other}"),
        };
        let cfg = TrainingConfig {
            epochs,
            seed,
            learning_rate: lr,
            beta_max: beta,
            soft_pseudo_labels: soft,
            bank_capacity: cap,
            topk,
            steps_per_patient: steps,
            ramp_fraction: ramp,
            sigma,
            enable_mcl: mcl,
            enable_tcr: tcr,
            ..TrainingConfig::default()
        };
        let t0 = Instant::now();
        let out = ssl::train(train_set, &net, &cfg, |_, _| Ok(())).expect("train");
        let secs = t0.elapsed().as_secs_f64();

        let n_phases = test_set[0].n_phases();
        let mut phase_sum = vec![0.0f64; n_phases];
        let mut usum = 0.0;
        let mut un = 0usize;
        for seq in test_set {
            let probs = ssl::predict_sequence(&out.student, &net, seq, eval_mcl, cfg.topk, cap)
                .expect("predict");
            for (t, prob) in probs.iter().enumerate() {
                let mask = ssl::probability_to_mask(prob);
                let gt = seq.phases[t].label.as_ref().expect("gt");
                let d = metrics::dice(&mask, gt).expect("dice");
                phase_sum[t] += d;
                if t != seq.labeled_indices.0 && t != seq.labeled_indices.1 {
                    usum += d;
                    un += 1;
                }
            }
        }
        let per: Vec<String> = phase_sum
            .iter()
            .map(|s| format!("{:5.1}", 100.0 * s / test_set.len() as f64))
            .collect();
        println!(
            "{arm:>5}: unlabeled {:5.2}  phases [{}]  ({secs:.0} s)",
            100.0 * usum / un as f64,
            per.join(" ")
        );
    }
}
