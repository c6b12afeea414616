// quick debug: run the same flow and print both row sets
use sitevae_core::harness::{run_class_sweep, ExperimentConfig};
fn main() {
    let dir = tempfile::tempdir().unwrap();
    let toml_text = format!(r#"
seeds = [0, 1]
[dataset]
kind = "synthetic"
n_subjects = 60
n_edges = 24
n_sites = 3
bio_rank = 2
site_strength = 8.0
noise_sd = 0.3
seed = 5
[model]
hidden_dims = [12]
z_c_dim = 2
k_classes = 3
gumbel_temperature = 0.67
[objective]
mode = "arch_anneal"
beta = 0.05
[train]
epochs = 6
batch_size = 20
anneal_iters = 10
learning_rate = 1e-3
[sweep]
k_grid = [3]
methods = ["jointvae_arch", "pca_kmeans"]
bootstrap_b = 30
pca_components = 3
[output]
dir = "{}"
write_training_logs = true
"#, dir.path().display());
    let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
    let a = run_class_sweep(&cfg).unwrap();
    let b = run_class_sweep(&cfg).unwrap();
    let mut ra = a.rows.clone(); ra.sort_by_key(|r| r.key());
    let mut rb = b.rows.clone(); rb.sort_by_key(|r| r.key());
    for (x, y) in ra.iter().zip(&rb) {
        if x != y { println!("DIFF:\n  first  {x:?}\n  second {y:?}"); }
    }
    println!("skipped: {} vs {}", a.skipped, b.skipped);
}
