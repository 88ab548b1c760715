use autoactivator::linalg::{hstack, pinv_full, pinv_extend, weights_extend, lstsq_residual, Mat, PinvState};
use autoactivator::rng::substream;
use rand::Rng;

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = substream(seed, &[rows as u64, cols as u64]);
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

fn main() {
    let mut worst_p = 0.0f64;
    let mut worst_w = 0.0f64;
    let mut fails = 0;
    for trial in 0..1000u64 {
        let mut rng = substream(0xACCE97, &[trial]);
        let n = rng.random_range(3usize..=12);
        let mut st = PinvState::empty();
        let mut w = Mat::zeros(0, 2);
        let y = random_mat(n, 2, 90_000 + trial);
        let mut cols: Vec<Mat> = Vec::new();
        let mut total = 0usize;
        let mut step = 0u64;
        while total < 10 {
            let l = rng.random_range(1usize..=4).min(10 - total);
            let g = random_mat(n, l, 50_000 + 31 * trial + step);
            w = weights_extend(&w, &st, &g, &y).unwrap();
            st = pinv_extend(&st, &g).unwrap();
            cols.push(g);
            total += l;
            step += 1;
        }
        let concat = cols.iter().skip(1).fold(cols[0].clone(), |acc, g| hstack(&acc, g));
        let direct = pinv_full(&concat).unwrap();
        let perr = (st.a_pinv() - &direct).norm() / direct.norm().max(1.0);
        let wgot = (&concat * &w - &y).norm_squared();
        let (_, wbest) = lstsq_residual(&concat, &y).unwrap();
        let werr = (wgot - wbest).abs() / wbest.max(1e-12);
        worst_p = worst_p.max(perr);
        worst_w = worst_w.max(werr);
        if perr > 1e-8 || werr > 1e-6 { fails += 1; if fails < 5 { println!("trial {trial} n={n}: perr={perr:.2e} werr={werr:.2e}"); } }
    }
    println!("worst pinv rel err: {worst_p:.3e}");
    println!("worst residual rel err: {worst_w:.3e}");
    println!("fails: {fails}/1000");
}
