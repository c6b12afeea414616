//! Acceptance gate: one test per release criterion, each printing a single
//! `PASS: criterion N — …` line on success (visible with `--nocapture`).
//!
//! Criteria 1–6 are fast numerical checks; 7–10 train small models on
//! synthetic cohorts and take minutes; 11 checks bit-exact reproducibility
//! and artifact round-trips.

use sitevae_core::data::{generate, ConnectomeDataset, SyntheticConfig};
use sitevae_core::model::{save_checkpoint, load_checkpoint, AnnealMode, JointVaeModel, ModelConfig};
use sitevae_core::ndgrad::{Graph, NodeId, Tensor};
use sitevae_core::objectives::{
    compose, kl_continuous, kl_continuous_annealed, kl_discrete, recon_loss, LossInputs,
    ObjectiveSpec,
};
use sitevae_core::rng::StreamRng;
use sitevae_core::stats::{
    adjusted_rand_index, ks_statistic_uniform, student_t_two_sided_p, welch_ttest,
};

// ───────────────────────── shared helpers ─────────────────────────

/// Central finite differences on every element of every leaf in `leaves`,
/// against the autodiff gradient; returns the worst relative error.
///
/// `build` must construct the same scalar loss from the graph and the
/// current leaf values on every call.
fn fd_check(leaves: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut g, &ids);
        g.scalar_value(loss)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads[li][e];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn rand_tensor(rng: &mut StreamRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::from_data(rows, cols, data).unwrap()
}

// ───────────────────────── criterion 1 ─────────────────────────

#[test]
fn criterion_01_autodiff_matches_finite_differences() {
    let mut rng = StreamRng::new(11, "fd");
    let mut worst = 0.0f64;

    // Every supported op, driven through a scalar summary so the FD
    // perturbation reaches each input element. Inputs live in [−2, 2]
    // and avoid the relu/abs/clamp kinks by construction.
    let a = rand_tensor(&mut rng, 3, 4, 0.2, 2.0);
    let b = rand_tensor(&mut rng, 4, 5, -2.0, -0.2);
    worst = worst.max(fd_check(&[a.clone(), b], |g, ids| {
        let m = g.matmul(ids[0], ids[1]).unwrap();
        g.sum_all(m).unwrap()
    }));

    let c = rand_tensor(&mut rng, 3, 4, -2.0, -0.2);
    worst = worst.max(fd_check(&[a.clone(), c.clone()], |g, ids| {
        let s = g.add(ids[0], ids[1]).unwrap();
        let s = g.sub(s, ids[1]).unwrap();
        let s = g.mul(s, ids[1]).unwrap();
        g.sum_all(s).unwrap()
    }));

    worst = worst.max(fd_check(&[c.clone()], |g, ids| {
        let e = g.exp(ids[0]).unwrap();
        let sg = g.sigmoid(e).unwrap();
        let lg = g.log(sg).unwrap();
        g.sum_all(lg).unwrap()
    }));

    worst = worst.max(fd_check(&[a.clone()], |g, ids| {
        let r = g.relu(ids[0]).unwrap(); // strictly positive inputs: no kink
        let sc = g.scale(r, -1.3).unwrap();
        let sh = g.add_scalar(sc, 0.4).unwrap();
        let ab = g.abs(sh).unwrap(); // inputs bounded away from 0
        g.sum_all(ab).unwrap()
    }));

    worst = worst.max(fd_check(&[c.clone()], |g, ids| {
        let cl = g.clamp_min(ids[0], -3.0).unwrap(); // all inputs > −3: identity region
        let sm = g.softmax_rows(cl).unwrap();
        let lt = g.log(sm).unwrap();
        g.sum_all(lt).unwrap()
    }));

    worst = worst.max(fd_check(&[a.clone(), c.clone()], |g, ids| {
        let cat = g.concat_cols(ids[0], ids[1]).unwrap();
        let sm = g.softmax_rows(cat).unwrap();
        let sq = g.mul(sm, sm).unwrap();
        g.sum_all(sq).unwrap()
    }));

    // 4-layer MLP, sigmoid output, Gaussian reconstruction loss: gradient
    // of every weight and bias.
    let dims = [5usize, 8, 6, 4, 2];
    let mut leaves: Vec<Tensor> = Vec::new();
    for w in dims.windows(2) {
        leaves.push(rand_tensor(&mut rng, w[0], w[1], -0.7, 0.7));
        leaves.push(rand_tensor(&mut rng, 1, w[1], -0.3, 0.3));
    }
    let x = rand_tensor(&mut rng, 3, 5, -1.5, 1.5);
    let target = rand_tensor(&mut rng, 3, 2, 0.1, 0.9);
    worst = worst.max(fd_check(&leaves, |g, ids| {
        let mut h = g.constant(x.clone());
        let last = ids.len() / 2 - 1;
        for (i, wb) in ids.chunks_exact(2).enumerate() {
            let lin = g.matmul(h, wb[0]).unwrap();
            let lin = g.add(lin, wb[1]).unwrap();
            h = if i == last {
                g.sigmoid(lin).unwrap()
            } else {
                g.relu(lin).unwrap()
            };
        }
        let t = g.constant(target.clone());
        recon_loss(g, t, h).unwrap()
    }));

    assert!(worst < 1e-4, "worst relative gradient error {worst:.3e}");
    println!("PASS: criterion 1 — autodiff matches central finite differences (worst rel err {worst:.2e} < 1e-4)");
}

// ───────────────────────── criterion 2 ─────────────────────────

#[test]
fn criterion_02_kl_identities() {
    let mut g = Graph::new();

    // kl_continuous(0, 0) = 0 exactly.
    let zeros = g.constant(Tensor::zeros(4, 6));
    let kl0 = kl_continuous(&mut g, zeros, zeros).unwrap();
    assert_eq!(g.scalar_value(kl0), 0.0);

    // Annealed endpoints on random heads.
    let mut rng = StreamRng::new(7, "klrand");
    let mu = g.constant(rand_tensor(&mut rng, 5, 3, -2.0, 2.0));
    let lv = g.constant(rand_tensor(&mut rng, 5, 3, -2.0, 2.0));
    let at0 = kl_continuous_annealed(&mut g, mu, lv, 0.0).unwrap();
    assert_eq!(g.scalar_value(at0), 0.0, "annealed KL at λ=0 must vanish");
    let at1 = kl_continuous_annealed(&mut g, mu, lv, 1.0).unwrap();
    let plain = kl_continuous(&mut g, mu, lv).unwrap();
    let diff = (g.scalar_value(at1) - g.scalar_value(plain)).abs();
    assert!(diff < 1e-12, "λ=1 vs plain differ by {diff:.3e}");

    // kl_discrete ∈ [0, ln K] over 10⁴ random logit rows.
    let k = 6usize;
    let ln_k = (k as f64).ln();
    for batch in 0..10 {
        let logits = g.constant(rand_tensor(&mut rng, 1000, k, -4.0, 4.0));
        let kd = kl_discrete(&mut g, logits).unwrap();
        let v = g.scalar_value(kd);
        assert!(
            (0.0..=ln_k + 1e-12).contains(&v),
            "batch {batch}: kl_discrete {v} outside [0, ln {k}]"
        );
    }

    // Uniform logits → 0 within 1e-12 (any constant row is uniform after
    // softmax).
    let uniform = g.constant(Tensor::from_data(3, k, vec![0.7; 3 * k]).unwrap());
    let kd_u = kl_discrete(&mut g, uniform).unwrap();
    assert!(g.scalar_value(kd_u).abs() < 1e-12);

    println!("PASS: criterion 2 — KL identities (zero at origin, annealed endpoints, [0, ln K] bounds, uniform → 0)");
}

// ───────────────────────── criterion 3 ─────────────────────────

#[test]
fn criterion_03_monte_carlo_oracles() {
    // Closed-form continuous KL vs a 10⁵-sample Monte-Carlo estimate of
    // E_q[log q(z) − log p(z)] for a diagonal Gaussian posterior.
    let mu = [0.8, -1.3, 0.25, 2.0];
    let lv = [0.5, -0.9, 0.0, -1.6];
    let mut g = Graph::new();
    let mu_n = g.constant(Tensor::row(mu.to_vec()));
    let lv_n = g.constant(Tensor::row(lv.to_vec()));
    let closed = {
        let kl = kl_continuous(&mut g, mu_n, lv_n).unwrap();
        g.scalar_value(kl)
    };
    let mut rng = StreamRng::new(99, "mc");
    let draws = 100_000usize;
    let mut acc = 0.0;
    for _ in 0..draws {
        for d in 0..mu.len() {
            let sd = (0.5 * lv[d]).exp();
            let z = mu[d] + sd * rng.normal();
            // log q − log p for one coordinate.
            let log_q = -0.5 * ((z - mu[d]) / sd).powi(2) - sd.ln();
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    let mc = acc / draws as f64;
    let rel = (closed - mc).abs() / closed.abs();
    assert!(rel < 0.01, "closed {closed:.5} vs MC {mc:.5}: rel err {rel:.4}");

    // Gumbel-Softmax hard-class frequencies under uniform logits.
    let k = 8usize;
    let cfg = ModelConfig {
        input_dim: 10,
        hidden_dims: vec![8],
        z_c_dim: 2,
        k_classes: k,
        gumbel_temperature: 0.67,
        anneal_mode: AnnealMode::None,
        straight_through: false,
    };
    let model = JointVaeModel::new(cfg, 5).unwrap();
    let rows = 100_000usize;
    let mut grng = StreamRng::new(2024, "gumbel-freq");
    let mut counts = vec![0usize; k];
    let chunk = 10_000;
    for _ in 0..rows / chunk {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(chunk, k));
        let noise: Vec<f64> = (0..chunk * k).map(|_| grng.gumbel()).collect();
        let gn = g.constant(Tensor::from_data(chunk, k, noise).unwrap());
        let s = model.sample_discrete(&mut g, logits, gn).unwrap();
        for &h in &s.hard {
            counts[h] += 1;
        }
    }
    let expected = rows as f64 / k as f64;
    for (cls, &c) in counts.iter().enumerate() {
        let rel = (c as f64 - expected).abs() / expected;
        assert!(
            rel < 0.01,
            "class {cls}: frequency {c} deviates from {expected} by {rel:.4}"
        );
    }

    println!("PASS: criterion 3 — Monte-Carlo oracles (KL rel err {rel:.4} < 1%, uniform Gumbel frequencies within 1% of 1/K)");
}

// ───────────────────────── criterion 4 ─────────────────────────

/// Full forward + backward under a given mode and λ; returns the loss bits
/// and every parameter gradient.
fn arch_forward(mode: AnnealMode, lambda: f64) -> (u64, Vec<Vec<f64>>) {
    let cfg = ModelConfig {
        input_dim: 12,
        hidden_dims: vec![10, 7],
        z_c_dim: 3,
        k_classes: 5,
        gumbel_temperature: 0.67,
        anneal_mode: mode,
        straight_through: false,
    };
    let model = JointVaeModel::new(cfg, 42).unwrap();
    let batch = 6usize;
    let mut xr = StreamRng::new(17, "x");
    let x: Vec<f64> = (0..batch * 12).map(|_| xr.uniform()).collect();
    let mut er = StreamRng::new(18, "eps");
    let eps: Vec<f64> = (0..batch * 3).map(|_| er.normal()).collect();
    let mut gr = StreamRng::new(19, "gum");
    let gum: Vec<f64> = (0..batch * 5).map(|_| gr.gumbel()).collect();

    let mut g = Graph::new();
    let bind = model.bind(&mut g);
    let xn = g.constant(Tensor::from_data(batch, 12, x).unwrap());
    let post = model.encode(&mut g, &bind, xn, lambda).unwrap();
    let en = g.constant(Tensor::from_data(batch, 3, eps).unwrap());
    let zc = model.sample_continuous(&mut g, &post, en).unwrap();
    let gn = g.constant(Tensor::from_data(batch, 5, gum).unwrap());
    let zd = model
        .sample_discrete(&mut g, post.logits.unwrap(), gn)
        .unwrap();
    let xh = model.decode(&mut g, &bind, zc, Some(zd.sample)).unwrap();
    let spec = ObjectiveSpec::plain(1.0, 1.0);
    let inp = LossInputs {
        x: xn,
        x_hat: xh,
        post,
    };
    let (total, _) = compose(&mut g, &spec, &inp).unwrap();
    g.backward(total).unwrap();
    let grads = bind
        .param_ids()
        .iter()
        .map(|&id| g.grad(id).unwrap().to_vec())
        .collect();
    (g.scalar_value(total).to_bits(), grads)
}

#[test]
fn criterion_04_architectural_annealing_identities() {
    // λ=0 forces the continuous heads to exactly zero and kl_c to 0.
    let cfg = ModelConfig {
        input_dim: 12,
        hidden_dims: vec![10, 7],
        z_c_dim: 3,
        k_classes: 5,
        gumbel_temperature: 0.67,
        anneal_mode: AnnealMode::ArchAnneal,
        straight_through: false,
    };
    let model = JointVaeModel::new(cfg, 42).unwrap();
    let mut xr = StreamRng::new(23, "x0");
    let x: Vec<f64> = (0..4 * 12).map(|_| xr.uniform()).collect();
    let mut g = Graph::new();
    let bind = model.bind(&mut g);
    let xn = g.constant(Tensor::from_data(4, 12, x).unwrap());
    let post = model.encode(&mut g, &bind, xn, 0.0).unwrap();
    assert!(g.data(post.mu).iter().all(|&v| v == 0.0), "μ not exactly 0");
    assert!(
        g.data(post.log_var).iter().all(|&v| v == 0.0),
        "log σ² not exactly 0"
    );
    let klc = kl_continuous(&mut g, post.mu, post.log_var).unwrap();
    assert_eq!(g.scalar_value(klc), 0.0, "kl_c at λ=0 must be exactly 0");

    // λ=1 : loss and all gradients bit-identical to anneal_mode = none.
    let (bits_arch, grads_arch) = arch_forward(AnnealMode::ArchAnneal, 1.0);
    let (bits_none, grads_none) = arch_forward(AnnealMode::None, 1.0);
    assert_eq!(bits_arch, bits_none, "loss bits differ at λ=1");
    assert_eq!(grads_arch.len(), grads_none.len());
    for (a, b) in grads_arch.iter().zip(&grads_none) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits(), "gradient bits differ at λ=1");
        }
    }

    println!("PASS: criterion 4 — architectural annealing identities (λ=0 zeroes heads and kl_c; λ=1 bit-identical to plain)");
}

// ───────────────────────── criterion 5 ─────────────────────────

/// O(N²) pair-counting ARI straight from the definition.
fn ari_brute_force(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut n11, mut n00, mut n10, mut n01) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let same_a = a[i] == a[j];
            let same_b = b[i] == b[j];
            match (same_a, same_b) {
                (true, true) => n11 += 1.0,
                (false, false) => n00 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
            }
        }
    }
    let total = n11 + n00 + n10 + n01;
    let expected = (n11 + n10) * (n11 + n01) / total;
    let max_index = 0.5 * ((n11 + n10) + (n11 + n01));
    if (max_index - expected).abs() == 0.0 {
        return 1.0;
    }
    (n11 - expected) / (max_index - expected)
}

#[test]
fn criterion_05_ari_oracles() {
    // Hand case.
    let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    assert!((ari + 0.5).abs() < 1e-12, "hand case gave {ari}");

    // Closed form vs brute force on random partitions, N ≤ 200.
    let mut rng = StreamRng::new(31, "ari");
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = 50 + (trial * 7) % 151;
        let ka = 2 + trial % 5;
        let kb = 2 + (trial / 2) % 6;
        let a: Vec<usize> = (0..n).map(|_| rng.below(ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.below(kb)).collect();
        let fast = adjusted_rand_index(&a, &b).unwrap();
        let brute = ari_brute_force(&a, &b);
        worst = worst.max((fast - brute).abs());
    }
    assert!(worst < 1e-12, "closed form vs brute force differ by {worst:.3e}");

    // Chance correction: random partitions score ≈ 0 on average.
    let mut acc = 0.0;
    for _ in 0..100 {
        let a: Vec<usize> = (0..500).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..500).map(|_| rng.below(4)).collect();
        acc += adjusted_rand_index(&a, &b).unwrap();
    }
    let mean = acc / 100.0;
    assert!(mean.abs() < 0.02, "mean ARI of random labels {mean}");

    println!("PASS: criterion 5 — ARI (brute-force agreement {worst:.1e}, hand case −0.5, random-label mean {mean:.4})");
}

// ───────────────────────── criterion 6 ─────────────────────────

#[test]
fn criterion_06_welch_t_test() {
    // Reference point: two-sided p at t=2.0 with ν=10.
    let p = student_t_two_sided_p(2.0, 10.0).unwrap();
    assert!(
        (p - 0.0734).abs() < 1e-3,
        "p(t=2, ν=10) = {p}, expected ≈ 0.0734"
    );

    // Null calibration: p-values of Welch tests on same-mean Gaussians are
    // uniform; Kolmogorov–Smirnov at α=0.05 (critical D = 1.358/√m).
    let mut rng = StreamRng::new(63, "null");
    let m = 1000usize;
    let mut pvals = Vec::with_capacity(m);
    for _ in 0..m {
        let a: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..40).map(|_| 1.7 * rng.normal()).collect();
        pvals.push(welch_ttest(&a, &b).unwrap().p);
    }
    let d = ks_statistic_uniform(&pvals);
    let crit = 1.358 / (m as f64).sqrt();
    assert!(d < crit, "KS statistic {d:.4} ≥ critical {crit:.4}");

    println!("PASS: criterion 6 — Welch t-test (p(2, 10) ≈ {p:.4}, null KS {d:.4} < {crit:.4})");
}

// ───────────────────────── criterion 11 ─────────────────────────

#[test]
fn criterion_11_determinism_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();

    let syn = SyntheticConfig {
        n_subjects: 60,
        n_edges: 40,
        n_sites: 3,
        bio_rank: 2,
        site_strength: 6.0,
        noise_sd: 0.4,
        seed: 77,
        site_concentration: None,
    };
    let ds = generate(&syn).unwrap();

    // Dataset cache round-trip is exact.
    let cache = dir.path().join("ds.bin");
    ds.save_cache(&cache).unwrap();
    let back = ConnectomeDataset::load_cache(&cache).unwrap();
    assert_eq!(ds.x.len(), back.x.len());
    assert!(ds.x.iter().zip(&back.x).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(ds.site, back.site);

    // Two identical trainings produce bit-identical weights.
    let mcfg = ModelConfig {
        input_dim: ds.d,
        hidden_dims: vec![16, 8],
        z_c_dim: 3,
        k_classes: 3,
        gumbel_temperature: 0.67,
        anneal_mode: AnnealMode::ArchAnneal,
        straight_through: false,
    };
    let tcfg = sitevae_core::trainer::TrainConfig {
        epochs: 30,
        batch_size: 20,
        anneal_iters: 40,
        seed: 5,
        ..Default::default()
    };
    let spec = ObjectiveSpec::arch_anneal(0.01);
    let run = |_: u32| {
        let mut m = JointVaeModel::new(mcfg.clone(), 5).unwrap();
        let rep = sitevae_core::trainer::train(&mut m, &ds, &spec, &tcfg).unwrap();
        (m, rep.iterations)
    };
    let (m1, it1) = run(1);
    let (m2, it2) = run(2);
    assert_eq!(it1, it2);
    for (a, b) in m1.params().iter().zip(m2.params().iter()) {
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "repeated training diverged"
        );
    }

    // Checkpoint round-trip: config, weights, iteration, stream states.
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &m1, it1, &[]).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.iteration, it1);
    assert_eq!(loaded.model.config, m1.config);
    for (a, b) in loaded.model.params().iter().zip(m1.params().iter()) {
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "checkpoint round-trip changed weights"
        );
    }

    println!("PASS: criterion 11 — determinism (bit-identical reruns) and cache/checkpoint round-trips");
}
