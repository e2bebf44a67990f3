use quadric_landmarks::bench::{refinement_ab, BenchConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn refinement_improves_bbox_noise_initializations() {
    let cfg = BenchConfig::default();
    let trials = refinement_ab(&cfg).unwrap();
    assert_eq!(trials.len(), 100);
    let paired: Vec<_> = trials.iter().filter_map(|t| Some((t.before?, t.after?))).collect();
    assert!(paired.len() >= 95, "{} refined", paired.len());
    let d_trans = median(paired.iter().map(|(b, a)| a.e_trans - b.e_trans).collect());
    let d_axe = median(paired.iter().map(|(b, a)| a.e_axe - b.e_axe).collect());
    eprintln!(
        "median change over {} trials: e_trans {d_trans:+.4} m, e_axe {d_axe:+.4} m",
        paired.len()
    );
    assert!(d_trans <= 0.0 && d_axe <= 0.0);
}
