use coda_core::algorithms::*;
use coda_core::bandit::*;
use std::time::Instant;

fn main() {
    let (inst, class) = make_hard_instance(8, 1.0, NoiseModel::Bernoulli, 0).unwrap();
    let offline = OfflineDataset::draw(&inst, 4000, 9);
    let t0 = Instant::now();
    match coda(&inst, &class, 0.1, 0.1, &offline, 2, &CodaConfig::default()) {
        Ok((chosen, rec)) => {
            println!("m=8 ok chosen={chosen} tau={} in {:?}", rec.total_samples, t0.elapsed());
            for r in &rec.rounds {
                println!("  round {} n_l={} calls={} cert_gap={:.4}", r.round, r.n_l, r.oracle_calls, r.certificate.unwrap().gap);
            }
        }
        Err(e) => println!("m=8 ERR after {:?}: {e}", t0.elapsed()),
    }
    let (inst4, class4) = make_hard_instance(4, 1.0, NoiseModel::Bernoulli, 0).unwrap();
    let off4 = OfflineDataset::draw(&inst4, 2000, 11);
    let t1 = Instant::now();
    let (_, rec) = coda(&inst4, &class4, 0.1, 0.1, &off4, 0, &CodaConfig::default()).unwrap();
    println!("m=4 tau={} in {:?}", rec.total_samples, t1.elapsed());
    for r in &rec.rounds {
        println!("  round {} n_l={} calls={}", r.round, r.n_l, r.oracle_calls);
    }
}
