//! Binary parameter checkpoints.
//!
//! All integers and reals are little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"MGRPOCKP"
//! 8       4  u32      format version (1)
//! 12      4  u32      activation tag (0 = tanh, 1 = relu)
//! 16      4  u32      input_dim
//! 20      4  u32      output_dim
//! 24      4  u32      number of hidden layers H
//! 28      4*H u32     hidden widths
//! ..      8  u64      parameter count P
//! ..      8*P f64     parameters in layout order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, MlpSpec, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MGRPOCKP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, spec: &MlpSpec, params: &ParamVector) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec.activation.tag().to_le_bytes())?;
    w.write_all(&(spec.input_dim as u32).to_le_bytes())?;
    w.write_all(&(spec.output_dim as u32).to_le_bytes())?;
    w.write_all(&(spec.hidden_dims.len() as u32).to_le_bytes())?;
    for &h in &spec.hidden_dims {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MlpSpec, ParamVector)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = read_u32(&mut r)?;
    let activation =
        Activation::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown activation tag {tag}")))?;
    let input_dim = read_u32(&mut r)? as usize;
    let output_dim = read_u32(&mut r)? as usize;
    let n_hidden = read_u32(&mut r)? as usize;
    let hidden_dims = (0..n_hidden)
        .map(|_| read_u32(&mut r).map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec {
        input_dim,
        hidden_dims,
        output_dim,
        activation,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("invalid architecture: {e}")))?;

    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    let count = u64::from_le_bytes(buf8) as usize;
    if count != spec.param_count() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match architecture ({})",
            spec.param_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf8)
            .map_err(|e| Error::Format(format!("truncated at parameter {i}: {e}")))?;
        values.push(f64::from_le_bytes(buf8));
    }
    let params = ParamVector::new(values);
    params.check_finite("checkpoint parameters")?;
    Ok((spec, params))
}

pub fn save_checkpoint(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), spec, params).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpSpec, ParamVector)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_forward, mlp_init};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_reproduces_forward_bitwise(
            input_dim in 1usize..5,
            hidden in proptest::collection::vec(1usize..7, 0..3),
            output_dim in 1usize..4,
            relu in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let act = if relu { Activation::Relu } else { Activation::Tanh };
            let spec = MlpSpec::new(input_dim, hidden, output_dim).with_activation(act);
            let params = mlp_init(&spec, seed).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &spec, &params).unwrap();
            let (spec2, params2) = read_checkpoint(bytes.as_slice()).unwrap();
            prop_assert_eq!(&spec2, &spec);
            let x: Vec<f64> = (0..input_dim).map(|i| 0.37 * i as f64 - 0.4).collect();
            let a = mlp_forward(&params, &spec, &x).unwrap();
            let b = mlp_forward(&params2, &spec2, &x).unwrap();
            prop_assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn header_layout() {
        let spec = MlpSpec::new(2, vec![3], 1);
        let params = ParamVector::new((0..spec.param_count()).map(|i| i as f64).collect());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &spec, &params).unwrap();
        assert_eq!(bytes.len(), 8 + 4 * 5 + 4 + 8 + 8 * 13);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 13);
        assert_eq!(f64::from_le_bytes(bytes[48..56].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_corruption() {
        let spec = MlpSpec::new(2, vec![3], 1);
        let params = mlp_init(&spec, 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &spec, &params).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[32] = 99;
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
