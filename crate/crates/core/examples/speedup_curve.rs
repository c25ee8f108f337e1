//! Tabulates the pipeline speedup model for a few compute / communication ratios and
//! marks the best integer worker count.

use temporal_fusion::pipeline::{best_integer_k, emit_model_curve, optimal_k, speedup_mu};
use temporal_fusion::SpeedupModel;

fn main() -> temporal_fusion::Result<()> {
    let ratios = [4.0, 16.0, 64.0];
    let rows = emit_model_curve(&ratios, 12)?;
    print!("{:>4}", "k");
    for r in ratios {
        print!("{:>10}", format!("Ts/Tc={r}"));
    }
    println!();
    for k in 1..=12 {
        print!("{k:>4}");
        for r in ratios {
            let mu = rows.iter().find(|row| row.ratio == r && row.k == k).map(|row| row.mu).unwrap_or(f64::NAN);
            print!("{mu:>10.3}");
        }
        println!();
    }
    for r in ratios {
        let m = SpeedupModel::from_ratio(r)?;
        let k = best_integer_k(&m);
        println!("Ts/Tc={r}: continuous optimum {:.2}, best integer k={k} (mu {:.3})", optimal_k(&m), speedup_mu(&m, k));
    }
    Ok(())
}
