use eegdiff::evalkit::{bootstrap_table, clap_score, Direction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const RESAMPLES: usize = 4000;
const REPETITIONS: usize = 500;
const PAIRS: usize = 84;
const DIM: usize = 32;

fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn table(gt: &[Vec<f64>], dec: &[Vec<f64>]) -> Vec<f64> {
    let mut t = Vec::with_capacity(gt.len() * dec.len());
    for g in gt {
        for d in dec {
            t.push(clap_score(d, g).unwrap());
        }
    }
    t
}

#[test]
fn independent_decoding_rejects_at_nominal_rate() {
    let mut rejected = 0;
    for rep in 0..REPETITIONS {
        let mut rng = ChaCha8Rng::seed_from_u64(rep as u64);
        let gt: Vec<_> = (0..PAIRS).map(|_| unit(&mut rng)).collect();
        let dec: Vec<_> = (0..PAIRS).map(|_| unit(&mut rng)).collect();
        let r = bootstrap_table(&table(&gt, &dec), PAIRS, RESAMPLES, 1000 + rep as u64, Direction::HigherBetter).unwrap();
        rejected += (r.p_value < 0.05) as usize;
    }
    let frac = rejected as f64 / REPETITIONS as f64;
    println!("null rejection fraction {frac:.3}");
    assert!((0.03..=0.07).contains(&frac), "fraction {frac}");
}

#[test]
fn perfect_decoding_of_near_orthogonal_tracks_is_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // 8 tracks, chunks are small perturbations of a random track direction
    let tracks: Vec<_> = (0..8).map(|_| unit(&mut rng)).collect();
    let gt: Vec<Vec<f64>> = (0..PAIRS)
        .map(|i| {
            let noise = unit(&mut rng);
            let v: Vec<f64> = tracks[i % 8].iter().zip(&noise).map(|(t, e)| t + 0.1 * e).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let r = bootstrap_table(&table(&gt, &gt), PAIRS, RESAMPLES, 7, Direction::HigherBetter).unwrap();
    println!("p = {}", r.p_value);
    assert!(r.p_value <= 0.01);
    assert!((r.observed - 1.0).abs() < 1e-12);
}
