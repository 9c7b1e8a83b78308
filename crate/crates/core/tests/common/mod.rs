//! Brute-force references shared by the integration tests.

/// Per-class densities by scanning every bin for every pixel; overflow
/// depths count in the last bin and zero depths nowhere.
pub fn histogram_oracle(
    labels: &[u8],
    depth: &[f64],
    classes: usize,
    edges: &[f64],
) -> Vec<Vec<f64>> {
    let n = edges.len() - 1;
    let mut out = Vec::new();
    for class in 0..classes {
        let mut counts = vec![0u64; n];
        for (&l, &d) in labels.iter().zip(depth) {
            if l as usize != class || d == 0.0 {
                continue;
            }
            for k in 0..n {
                let inside = edges[k] <= d && d < edges[k + 1];
                let overflow = k == n - 1 && d >= edges[n];
                if inside || overflow {
                    counts[k] += 1;
                }
            }
        }
        let support: u64 = counts.iter().sum();
        out.push(
            counts
                .iter()
                .map(|&c| {
                    if support == 0 {
                        0.0
                    } else {
                        c as f64 / support as f64
                    }
                })
                .collect(),
        );
    }
    out
}
