//! Exact signed-rank and one-sided t-tests with significance flags.
//!
//!     cargo run --release --example significance

use neurotune::stats::{flag_significance, one_sample_ttest_onesided, sem, wilcoxon_signed_rank, Alternative};

fn main() -> neurotune::Result<()> {
    let samples: [&[f64]; 3] = [
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        &[3.0, 5.0, -1.0, 7.0, 9.0, 11.0],
        &[0.12, -0.03, 0.08, 0.0, 0.05, 0.02],
    ];
    for d in samples {
        let w = wilcoxon_signed_rank(d, Alternative::Greater)?;
        let w2 = wilcoxon_signed_rank(d, Alternative::TwoSided)?;
        println!(
            "{d:?}\n  W+ {} (n {})  p> {:.6} {}  p2 {:.6} {}",
            w.w_plus,
            w.n,
            w.p,
            flag_significance(w.p),
            w2.p,
            flag_significance(w2.p)
        );
    }
    let gains = [2.0, -1.0, 3.0, 0.0, 1.0, 1.0];
    let t = one_sample_ttest_onesided(&gains)?;
    println!(
        "t-test {gains:?}: t {:.4} df {} p {:.4} {}  sem {:.4}",
        t.t,
        t.df,
        t.p,
        flag_significance(t.p),
        sem(&gains)?
    );
    Ok(())
}
