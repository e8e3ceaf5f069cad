//! Brute-force recomputation of the shapelet engine and prototype matching.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfshapelet::inference::{build_prototypes, fewshot_predict};
use rfshapelet::model::Model;
use rfshapelet::shapelet::{best_match, sliding_distances, Shapelet, ShapeletBank, ShapeletConfig};
use rfshapelet::signal::IqFrame;
use rfshapelet::Tensor64;

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-10;

fn random_rows(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..2 * len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn shapelet(values: Vec<f64>) -> Shapelet<f64> {
    let l = values.len() / 2;
    Shapelet {
        values: Tensor64::new(&[2, l], values).unwrap(),
        group: 0,
    }
}

fn naive_distances(x: &[f64], s: &[f64]) -> Vec<f64> {
    let t = x.len() / 2;
    let l = s.len() / 2;
    let mut out = Vec::new();
    for j in 0..=t - l {
        let mut acc = 0.0;
        for r in 0..2 {
            for c in 0..l {
                let e = s[r * l + c] - x[r * t + j + c];
                acc += e * e;
            }
        }
        out.push(acc.sqrt());
    }
    out
}

fn naive_activation(d: &[f64]) -> f64 {
    let z: f64 = d.iter().map(|v| (-v).exp()).sum();
    d.iter().map(|v| (-v).exp() / z * -v).sum()
}

fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let t = rng.gen_range(2..64);
    let l = rng.gen_range(2..=t);
    (random_rows(rng, t), random_rows(rng, l))
}

#[test]
fn sliding_distances_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let (x, s) = instance(&mut rng);
        let got = sliding_distances(&x, &shapelet(s.clone())).unwrap();
        let want = naive_distances(&x, &s);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= TOL, "{a} vs {b}");
        }
    }
}

#[test]
fn best_match_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..INSTANCES {
        let (mut x, s) = instance(&mut rng);
        let l = s.len() / 2;
        let t = x.len() / 2;
        // plant an exact copy in half the instances
        if i % 2 == 0 {
            let at = rng.gen_range(0..=t - l);
            for r in 0..2 {
                x[r * t + at..r * t + at + l].copy_from_slice(&s[r * l..(r + 1) * l]);
            }
        }
        let d = naive_distances(&x, &s);
        let mut want = 0;
        for j in 1..d.len() {
            if d[j] < d[want] {
                want = j;
            }
        }
        let (at, dmin) = best_match(&x, &shapelet(s)).unwrap();
        assert!((dmin - d[want]).abs() <= TOL);
        // equal-within-rounding windows may swap; the picked window must be minimal
        assert!(at == want || (d[at] - d[want]).abs() <= TOL);
    }
}

#[test]
fn activations_match_per_shapelet_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let t = rng.gen_range(16..64);
        let x = random_rows(&mut rng, t);
        let k = rng.gen_range(1..6);
        let raw: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let l = rng.gen_range(2..=16);
                random_rows(&mut rng, l)
            })
            .collect();
        let bank = ShapeletBank {
            config: ShapeletConfig::default(),
            shapelets: raw.iter().cloned().map(shapelet).collect(),
        };
        let got = bank.activations(&x).unwrap();
        assert_eq!(got.len(), k);
        for (a, s) in got.iter().zip(&raw) {
            let want = naive_activation(&naive_distances(&x, s));
            assert!((a - want).abs() <= TOL, "{a} vs {want}");
        }
    }
}

struct Pool {
    model: Model<f64>,
    frames: Vec<IqFrame>,
    z: Vec<Vec<f64>>,
}

fn pool() -> Pool {
    let frames = common::frames(4, 48, 100);
    let model = Model::<f64>::init(&common::tiny(4), &frames).unwrap();
    let z = frames
        .iter()
        .map(|f| model.forward_joint(&[f]).unwrap().z.data().to_vec())
        .collect();
    Pool { model, frames, z }
}

fn mean_rows(rows: &[&Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn support(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    // at least one frame per class, so every class has a prototype
    let mut idx: Vec<usize> = (0..4).map(|c| c + 4 * rng.gen_range(0..n / 4)).collect();
    for _ in 0..rng.gen_range(0..8) {
        idx.push(rng.gen_range(0..n));
    }
    idx
}

#[test]
fn prototypes_match_class_means() {
    let p = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let idx = support(&mut rng, p.frames.len());
        let refs: Vec<&IqFrame> = idx.iter().map(|&i| &p.frames[i]).collect();
        let set = build_prototypes(&p.model, &refs).unwrap();
        assert_eq!(set.classes, vec![0, 1, 2, 3]);
        for (k, &c) in set.classes.iter().enumerate() {
            let rows: Vec<&Vec<f64>> = idx.iter().filter(|&&i| p.frames[i].device == c).map(|&i| &p.z[i]).collect();
            assert_eq!(set.counts[k], rows.len());
            for (a, b) in set.prototypes[k].iter().zip(mean_rows(&rows)) {
                assert!((a - b).abs() <= TOL, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn fewshot_predict_matches_nearest_scan() {
    let p = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let idx = support(&mut rng, p.frames.len());
        let refs: Vec<&IqFrame> = idx.iter().map(|&i| &p.frames[i]).collect();
        let set = build_prototypes(&p.model, &refs).unwrap();
        let q = rng.gen_range(0..p.frames.len());
        let dist = |c: usize| -> f64 {
            let rows: Vec<&Vec<f64>> = idx.iter().filter(|&&i| p.frames[i].device == c).map(|&i| &p.z[i]).collect();
            mean_rows(&rows).iter().zip(&p.z[q]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let d: Vec<f64> = (0..4).map(dist).collect();
        let mut want = 0;
        for c in 1..4 {
            if d[c] < d[want] {
                want = c;
            }
        }
        let got = fewshot_predict(&p.model, &set, &p.frames[q]).unwrap();
        assert!(got == want || (d[got] - d[want]).abs() <= TOL);
    }
}
