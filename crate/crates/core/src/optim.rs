//! Nelder-Mead simplex minimization for low-dimensional objectives.

/// Minimizes `f` from `x0` with the standard reflection/expansion/
/// contraction/shrink coefficients (1, 2, 0.5, 0.5). Returns the best point
/// and its objective value.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: f64, max_iter: usize, tol: f64) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += if p[i].abs() > 1e-8 { p[i] * step } else { step };
        simplex.push(p);
    }
    let mut scores: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim.saturating_sub(1)];

        if (scores[worst] - scores[best]).abs() < tol {
            break;
        }

        let mut centroid = vec![0.0; dim];
        for &i in order.iter().take(dim) {
            for d in 0..dim {
                centroid[d] += simplex[i][d] / dim as f64;
            }
        }

        let blend = |a: f64| -> Vec<f64> {
            (0..dim)
                .map(|d| centroid[d] + a * (simplex[worst][d] - centroid[d]))
                .collect()
        };

        let reflected = blend(-1.0);
        let fr = f(&reflected);
        if fr < scores[best] {
            let expanded = blend(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                scores[worst] = fe;
            } else {
                simplex[worst] = reflected;
                scores[worst] = fr;
            }
        } else if fr < scores[second_worst] {
            simplex[worst] = reflected;
            scores[worst] = fr;
        } else {
            let contracted = blend(0.5);
            let fc = f(&contracted);
            if fc < scores[worst] {
                simplex[worst] = contracted;
                scores[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let best_point = simplex[best].clone();
                for i in 0..=dim {
                    if i == best {
                        continue;
                    }
                    for d in 0..dim {
                        simplex[i][d] = best_point[d] + 0.5 * (simplex[i][d] - best_point[d]);
                    }
                    scores[i] = f(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=dim {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    (simplex[best].clone(), scores[best])
}
