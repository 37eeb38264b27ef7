use coda_core::bandit::*;
use coda_core::design::ContextWeights;
use coda_core::solvers::*;

fn main() {
    let (inst, class) = make_hard_instance(4, 1.0, NoiseModel::Bernoulli, 0).unwrap();
    let contexts = ContextWeights::exact(&inst);
    // round-3-like setting: pivot already optimal, gaps estimated around 0.5
    let eps_l = 0.125f64;
    let params = RoundParams {
        epsilon_l: eps_l,
        delta_l: 0.1 / (9.0 * 16.0),
        eta_l: eta_for_round(1.0, eps_l, 2),
        n_actions: 2,
        pivot: 0,
    };
    let gaps = [0.0, 0.5, 0.5, 0.5];
    let gap_fn = |i: usize| gaps[i];
    let ctx = HContext { class: &class, contexts: &contexts, params: &params, gap_est: &gap_fn };
    let cfg = FwGdConfig::default();
    for k in 0..12u32 {
        let n = 16u64 << k;
        let mut stats = FwGdStats::default();
        match solve_for_budget(&ctx, n, &GradArgmax::Dense, &cfg, &mut stats).unwrap() {
            Ok((it, cert)) => {
                println!("n={n}: ACCEPT h={:.4} P={:.4} gap={:.4} iters={} supp={:?}", cert.dual, cert.primal, cert.gap, cert.iterations, it.support);
                break;
            }
            Err(cert) => {
                println!("n={n}: reject h={:.4} P={:.4} gap={:.4} fw_gap={:.4} iters={}", cert.dual, cert.primal, cert.gap, cert.fw_gap, cert.iterations);
            }
        }
    }
}
