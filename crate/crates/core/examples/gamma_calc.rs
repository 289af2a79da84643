use peritorus::resonance::{melnikov_check, FrequencyData};
fn main() {
    let s2 = std::f64::consts::SQRT_2;
    // intera: n=1, m=1, omega=1, Omega sqrt3
    let f1 = FrequencyData { omega: vec![1.0], omega_elliptic: vec![3.0f64.sqrt()], gamma: 1.0, tau: 2.0, divisor_floor: 1e-10 };
    let r1 = melnikov_check(&f1, 12);
    println!("intera min = {:.8e} at {:?} {:?}", r1.min_margin, r1.worst_ell, r1.worst_h);
    // linint: p=3
    let omega = [1.0, s2];
    let a: Vec<Vec<f64>> = vec![vec![1.,1.],vec![1.,2.],vec![1.,3.],vec![0.,1.]];
    let oe: Vec<f64> = a.iter().map(|aj| (aj[0]*omega[0] + aj[1]*omega[1])/3.0).collect();
    println!("linint Omegas = {:?}", oe);
    let f2 = FrequencyData { omega: omega.to_vec(), omega_elliptic: oe, gamma: 1.0, tau: 2.0, divisor_floor: 1e-10 };
    let r2 = melnikov_check(&f2, 12);
    println!("linint min = {:.8e} at {:?} {:?}", r2.min_margin, r2.worst_ell, r2.worst_h);
    // model_n2m2 at cutoff 12 for margin
    let lambda = 1.0 + (5.0f64.sqrt() - 2.0) / 5.0;
    let f3 = FrequencyData { omega: vec![1.0, lambda], omega_elliptic: vec![s2, 3.0f64.sqrt()], gamma: 1.0, tau: 2.0, divisor_floor: 1e-10 };
    let r3 = melnikov_check(&f3, 12);
    println!("model min (cutoff 12) = {:.8e} at {:?} {:?}", r3.min_margin, r3.worst_ell, r3.worst_h);
    println!("lambda = {:.16}", lambda);
    println!("sqrt2 = {:.16}, sqrt3 = {:.16}", s2, 3.0f64.sqrt());
    for (j, o) in f2.omega_elliptic.iter().enumerate() { println!("linint Omega[{j}] = {:.16}", o); }
}
