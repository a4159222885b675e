//! Prints balance, mean r_s and low-ratio fraction per policy over five seeds.
//!
//! cargo run --release -p dynscale --example policy_sweep [coco|starved]

use dynscale::{run_simulation, SimConfig, SimPolicy, SyntheticSpec};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "starved".into());
    let spec = match preset.as_str() {
        "coco" => SyntheticSpec::coco_like(),
        _ => SyntheticSpec::small_starved(),
    };
    let policies = [
        "all-regular",
        "all-collage",
        "random",
        "input-ratio",
        "cls-loss",
        "reg-loss",
        "joint-loss",
        "resampling",
    ];
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8}",
        "policy", "balance", "mean_rs", "low", "collage"
    );
    for name in policies {
        let policy: SimPolicy = name.parse().unwrap();
        let (mut b, mut r, mut l, mut c) = (vec![], vec![], vec![], vec![]);
        for seed in 0..5 {
            let ds = spec.with_seed(seed).generate();
            let rep = run_simulation(
                &ds,
                &SimConfig {
                    policy,
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            b.push(rep.balance());
            r.push(rep.mean_r_s());
            l.push(rep.low_ratio_fraction());
            c.push(rep.collage_fraction());
        }
        println!(
            "{name:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            median(b),
            median(r),
            median(l),
            median(c)
        );
    }
}
