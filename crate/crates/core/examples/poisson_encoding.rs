//! Encodes intensities as Poisson spike trains and shows that a fixed seed always
//! yields the same train.

use temporal_fusion::network::{derive_seed, encode_samples};

fn main() -> temporal_fusion::Result<()> {
    let sample = [0.0f32, 0.1, 0.5, 0.9, 1.0];
    let t_len = 40;
    let seed = derive_seed(42, 0, 3);
    let x = encode_samples(&[&sample], &[seed], sample.len(), t_len)?;
    let again = encode_samples(&[&sample], &[seed], sample.len(), t_len)?;
    assert_eq!(x, again);

    for (n, p) in sample.iter().enumerate() {
        let train: String = (0..t_len).map(|t| if x.get(t, 0, n) == 1.0 { '|' } else { '.' }).collect();
        let rate = (0..t_len).map(|t| x.get(t, 0, n)).sum::<f32>() / t_len as f32;
        println!("p={p:.1} rate={rate:.3} {train}");
    }
    Ok(())
}
