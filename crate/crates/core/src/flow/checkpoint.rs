//! Binary checkpoint for [`Mlp`] parameters.
//!
//! Layout (little endian):
//!
//! ```text
//! magic            8 bytes  "FLWRMLP1"
//! activation tag   u8 length, then ASCII ("silu")
//! compute width    u8 (4 = f32, 8 = f64)
//! layer count + 1  u32
//! layer sizes      u32 each, input first
//! per layer        weights (out × in, row-major) as f64, then biases as f64
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::flow::mlp::{Layer, Mlp, Scalar};

const MAGIC: &[u8; 8] = b"FLWRMLP1";
const ACTIVATION: &str = "silu";

pub fn encode<F: Scalar>(net: &Mlp<F>) -> Vec<u8> {
    let sizes = net.sizes();
    let mut out = Vec::with_capacity(32 + 8 * net.n_params());
    out.extend_from_slice(MAGIC);
    out.push(ACTIVATION.len() as u8);
    out.extend_from_slice(ACTIVATION.as_bytes());
    out.push(F::BYTES);
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in &sizes {
        out.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    for layer in net.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Mlp<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let tag_len = r.u8()? as usize;
    let tag = r.take(tag_len)?;
    if tag != ACTIVATION.as_bytes() {
        return Err(Error::Checkpoint(format!(
            "unsupported activation {:?}",
            String::from_utf8_lossy(tag)
        )));
    }
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported float width {width}")));
    }
    let n_sizes = r.u32()? as usize;
    if n_sizes < 2 {
        return Err(Error::Checkpoint("need at least two layer sizes".into()));
    }
    let sizes = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_sizes - 1);
    for pair in sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut weight = Array2::<F>::zeros((fan_out, fan_in));
        for w in weight.iter_mut() {
            *w = F::from_f64_lossy(r.f64()?);
        }
        let mut bias = Array1::<F>::zeros(fan_out);
        for b in bias.iter_mut() {
            *b = F::from_f64_lossy(r.f64()?);
        }
        layers.push(Layer { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Mlp::from_layers(layers)
}

pub fn save<F: Scalar>(net: &Mlp<F>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Mlp<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in any::<u64>(), sizes in proptest::collection::vec(1usize..12, 2..5)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::<f32>::new(&sizes, &mut rng).unwrap();
            let back: Mlp<f32> = decode(&encode(&net)).unwrap();
            prop_assert_eq!(&back, &net);
            let wide: Mlp<f64> = decode(&encode(&net)).unwrap();
            prop_assert_eq!(wide.cast::<f32>(), net);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f64>::new(&[3, 4, 2], &mut rng).unwrap();
        let bytes = encode(&net);
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }
}
