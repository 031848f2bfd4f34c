use moelab::pipeline::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = |lo: u32, hi: u32, rng: &mut ChaCha8Rng| rng.gen_range(lo..=hi) as f64 / 64.0;
    let mut fails = 0;
    for trial in 0..300 {
        // W <= F <= Bin, FB in [max(F,B), F+B]
        let w = grid(8, 96, &mut rng);
        let f = w + grid(0, 96, &mut rng);
        let b_in = f + grid(0, 96, &mut rng);
        let b = b_in + w;
        let fb = f.max(b) + grid(0, (f.min(b) * 64.0) as u32, &mut rng);
        let costs = ChunkCosts::new(f, b, w, fb).unwrap();
        for pp in [2usize, 4, 8] {
            for m in [pp, 2*pp, 20] {
                if m % 2 != 0 { continue; }
                let spec = ScheduleSpec::new(Method::DualPipe, pp, m).unwrap();
                let analytic = analytic_metrics(&spec, &costs).unwrap();
                let report = simulate(&build_schedule(&spec).unwrap(), &costs).unwrap();
                if report.bubble() != analytic.bubble {
                    fails += 1;
                    if fails < 8 {
                        println!("trial {trial} pp={pp} m={m} F={f} B={b} W={w} FB={fb} Bin={b_in}: sim {} vs {} (diff {})", report.bubble(), analytic.bubble, report.bubble()-analytic.bubble);
                    }
                }
            }
        }
    }
    println!("fails: {fails}");
}
