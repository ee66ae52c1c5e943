//! Scratch diagnostic (not part of the suite): validates the multi-init
//! k-means protocol for the un-mixing experiment at full stream scale.

use freda_core::clustering::{assign, kmeans_step, ClusterState, FeatureRepository};
use freda_core::config::RunConfig;
use freda_core::rng::SeededRng;
use freda_core::spectral::high_freq_feature;
use freda_core::stream::{mixed_stream, LabeledDataset};

fn purity(a: &[usize], d: &[usize]) -> f64 {
    freda_core::clustering::purity(a, d).unwrap()
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| {
            p.iter().zip(&centroids[a]).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()
        })
        .sum()
}

/// Multi-init k-means: fit on a subsample with several init families, keep the
/// lowest-objective candidate, refine on the full set, assign everything.
fn cluster_best(points: &[Vec<f64>], k: usize, root: &SeededRng, tag: &str) -> (Vec<usize>, f64) {
    let sub_n = 1024.min(points.len());
    let mut pick_rng = root.substream(&format!("{tag}:subsample"));
    let mut idx: Vec<usize> = (0..points.len()).collect();
    pick_rng.shuffle(&mut idx);
    let sub: Vec<Vec<f64>> = idx[..sub_n].iter().map(|&i| points[i].clone()).collect();
    let mut sub_repo = FeatureRepository::new(sub_n);
    sub_repo.push(&sub).unwrap();

    let mut norms: Vec<(f64, usize)> = sub
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().map(|x| x * x).sum::<f64>().sqrt(), i))
        .collect();
    norms.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, ClusterState)> = None;
    for r in 0..12 {
        let mut rng = root.substream(&format!("{tag}:restart:{r}"));
        let init = match r % 3 {
            0 => ClusterState::new(), // k-means++ cold start
            1 => {
                // uniform (Forgy) init
                let mut c = Vec::with_capacity(k);
                for _ in 0..k {
                    c.push(sub[rng.index(sub_n)].clone());
                }
                ClusterState { centroids: c, assignments: vec![], initialized: true }
            }
            _ => {
                // norm-stratified init: one seed per norm quantile
                let mut c = Vec::with_capacity(k);
                for q in 0..k {
                    let lo = q * sub_n / k;
                    let hi = ((q + 1) * sub_n / k).max(lo + 1);
                    let pick = lo + rng.index(hi - lo);
                    c.push(sub[norms[pick].1].clone());
                }
                ClusterState { centroids: c, assignments: vec![], initialized: true }
            }
        };
        let s = kmeans_step(&sub_repo, k, &init, 100, 1e-6, &mut rng).unwrap();
        let o = objective(&sub, &s.centroids, &s.assignments);
        if best.as_ref().is_none_or(|(bo, _)| o < *bo) {
            best = Some((o, s));
        }
    }
    let (_, winner) = best.unwrap();

    // Refine on the full set from the winning centroids.
    let mut full_repo = FeatureRepository::new(points.len());
    full_repo.push(points).unwrap();
    let warm =
        ClusterState { centroids: winner.centroids, assignments: vec![], initialized: true };
    let mut rng = root.substream(&format!("{tag}:refine"));
    let s = kmeans_step(&full_repo, k, &warm, 100, 1e-6, &mut rng).unwrap();
    let o = objective(points, &s.centroids, &s.assignments);
    (s.assignments, o)
}

#[test]
#[ignore]
fn probe_multi_init_protocol() {
    let ds = LabeledDataset::load(std::path::Path::new("/tmp/bench/test.frda")).unwrap();
    let cfg = RunConfig::default();
    let specs = cfg.corruption_specs().unwrap();
    let t0 = std::time::Instant::now();

    for seed in [0u64, 1, 2] {
        let root = SeededRng::from_seed(seed);
        let stream_rng = root.substream("stream");
        let events: Vec<_> = mixed_stream(&ds, &specs, 8000, stream_rng).unwrap().collect();
        let domains: Vec<usize> = events.iter().map(|e| e.true_domain()).collect();
        let feats: Vec<Vec<f64>> = events
            .iter()
            .map(|e| high_freq_feature(&e.image).unwrap().data().to_vec())
            .collect();
        let pixels: Vec<Vec<f64>> = events.iter().map(|e| e.image.data().to_vec()).collect();

        let (fa, fo) = cluster_best(&feats, 4, &root, "hf");
        let (pa, po) = cluster_best(&pixels, 4, &root, "px");
        let fp = purity(&fa, &domains);
        let pp = purity(&pa, &domains);

        // Oracle reference: Lloyd from per-domain means on the full set.
        let dim = feats[0].len();
        let mut means = vec![vec![0.0; dim]; 4];
        let mut counts = [0usize; 4];
        for (f, &d) in feats.iter().zip(&domains) {
            counts[d] += 1;
            for (m, x) in means[d].iter_mut().zip(f) {
                *m += x;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= n as f64;
            }
        }
        let oracle_assign = assign(&feats, &means);
        let oo = objective(&feats, &means, &oracle_assign);

        println!(
            "seed {seed}: feature purity {fp:.4} (obj {fo:.4e}, oracle obj {oo:.4e}) | pixel purity {pp:.4} (obj {po:.4e}) | elapsed {:.0}s",
            t0.elapsed().as_secs_f64()
        );
    }
}
