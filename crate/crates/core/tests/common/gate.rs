use rand::Rng;
use worldforge::gate::{route, Direction, QualityReport, Routing, Scores};
use worldforge::rng::substream;

pub fn report(v: [f64; 4]) -> QualityReport {
    QualityReport { scores: Scores::from_values(v), composite: 0.0, routing: Routing::Reject, scorer_versions: vec![] }
}

fn random_weights<R: Rng>(rng: &mut R) -> [f64; 4] {
    let mut w = [0.0; 4];
    for x in &mut w {
        *x = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) };
    }
    if w.iter().sum::<f64>() == 0.0 {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

fn random_score<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        2 => [0.25, 0.5, 0.75, 0.8, 0.4][rng.random_range(0..5)],
        _ => rng.random_range(0.0..=1.0),
    }
}

/// Raises a random subset of dimensions of a random report and checks the
/// routing never moves down. Returns `(cases, violations)`.
pub fn dominance_trials(cases: usize, seed: u64) -> (usize, usize) {
    let mut rng = substream(seed, "dominance");
    let mut bad = 0;
    for _ in 0..cases {
        let w = random_weights(&mut rng);
        let mut t = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        if rng.random_bool(0.2) {
            t[1] = t[0];
        }
        t.sort_by(f64::total_cmp);
        let lo: [f64; 4] = std::array::from_fn(|_| random_score(&mut rng));
        let hi: [f64; 4] = std::array::from_fn(|i| {
            if rng.random_bool(0.5) {
                rng.random_range(lo[i]..=1.0)
            } else {
                lo[i]
            }
        });
        let dir = if rng.random_bool(0.5) { Direction::HighToFinetune } else { Direction::HighToPretrain };
        let a = route(&report(lo), (t[0], t[1]), &w, dir).unwrap();
        let b = route(&report(hi), (t[0], t[1]), &w, dir).unwrap();
        let rank = |r: Routing| match (r, dir) {
            (Routing::Reject, _) => 0,
            (Routing::Pretrain, Direction::HighToFinetune) | (Routing::Finetune, Direction::HighToPretrain) => 1,
            _ => 2,
        };
        if rank(b) < rank(a) {
            bad += 1;
        }
    }
    (cases, bad)
}

/// The written boundary cases; returns the ones that fail.
pub fn boundary_failures() -> Vec<String> {
    let w = [0.25; 4];
    let d = Direction::HighToFinetune;
    let cases: [([f64; 4], (f64, f64), Routing); 7] = [
        ([1.0; 4], (0.5, 0.8), Routing::Finetune),
        ([1.0; 4], (1.0, 1.0), Routing::Finetune),
        ([1.0; 4], (0.0, 0.0), Routing::Finetune),
        ([0.5; 4], (0.5, 0.8), Routing::Pretrain),
        ([0.8; 4], (0.5, 0.8), Routing::Finetune),
        ([1.0, 1.0, 0.0, 0.0], (0.4, 0.8), Routing::Pretrain),
        ([0.0; 4], (0.0, 0.5), Routing::Pretrain),
    ];
    let mut out = Vec::new();
    for (s, t, want) in cases {
        let got = route(&report(s), t, &w, d).unwrap();
        if got != want {
            out.push(format!("{s:?} at {t:?}: {got} != {want}"));
        }
    }
    if route(&report([0.4999999999; 4]), (0.5, 0.8), &w, d).unwrap() != Routing::Reject {
        out.push("just below lo".into());
    }
    out
}
