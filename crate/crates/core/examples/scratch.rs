use nalgebra::DVector;
use sparsense::dictionary::FeasibleFamily;
use sparsense::recovery::omp_structured;
use sparsense::sensing::{draw_operator, measure, Ensemble};

fn main() {
    let g = 32;
    let mut ok = 0;
    let trials = 200;
    for seed in 0..trials {
        let a = draw_operator(Ensemble::Gaussian, 24, g, seed).unwrap();
        let ids = vec![2usize, 9, 17, 30];
        let mut alpha = vec![0.0; g];
        for (i, &id) in ids.iter().enumerate() {
            alpha[id] = [1.8, -1.2, 1.5, -1.9][i];
        }
        let z = measure(&a, &alpha, 0.0, 0).unwrap();
        let r = omp_structured(&z, &a.entries, 4, &FeasibleFamily::unconstrained(4)).unwrap();
        if r.support.members() == ids.as_slice() {
            ok += 1;
        } else if seed < 5 {
            println!("seed {seed}: got {:?} resid {}", r.support.members(), r.residual_norm);
            let zv = DVector::from_column_slice(&z.values);
            let sub = sparsense::linalg::columns(&a.entries, &ids);
            let (c, _) = sparsense::linalg::lstsq_min_norm(&sub, &zv).unwrap();
            println!("  true-support refit resid {}", (&zv - sub * c).norm());
        }
    }
    println!("success {ok}/{trials}");
}
