//! Weight snapshot format: the magic `MNCW1`, then for every tensor its rank
//! and dimensions as little-endian `u64`s followed by its values as
//! little-endian `f32`s. Tensors are listed layer by layer, parameters before
//! batchnorm running statistics.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::{Network, TrainState};
use super::tensor::Tensor;
use super::NnError;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"MNCW1";

pub fn write_snapshot<W: Write>(mut w: W, tensors: &[&Tensor<f32>]) -> io::Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    for t in tensors {
        w.write_u64::<LittleEndian>(t.shape().len() as u64)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<Vec<Tensor<f32>>, NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < SNAPSHOT_MAGIC.len() || &bytes[..SNAPSHOT_MAGIC.len()] != SNAPSHOT_MAGIC {
        return Err(NnError::Snapshot("missing MNCW1 magic".into()));
    }
    let mut cur = io::Cursor::new(&bytes[SNAPSHOT_MAGIC.len()..]);
    let truncated = |_| NnError::Snapshot("truncated tensor record".into());
    let mut out = Vec::new();
    while (cur.position() as usize) < cur.get_ref().len() {
        let rank = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if rank > 8 {
            return Err(NnError::Snapshot(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u64::<LittleEndian>().map_err(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let remaining = cur.get_ref().len() - cur.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(NnError::Snapshot("truncated tensor data".into()));
        }
        let mut data = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut data)
            .map_err(truncated)?;
        out.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

pub fn save_state<W: Write>(w: W, state: &TrainState<f32>) -> io::Result<()> {
    write_snapshot(w, &state.tensors())
}

/// Reads a snapshot into a fresh state laid out for `net`. Optimizer slots
/// start at zero.
pub fn load_state<R: Read>(r: R, net: &Network) -> Result<TrainState<f32>, NnError> {
    let tensors = read_snapshot(r)?;
    let mut state: TrainState<f32> = net.init_state(0);
    let expected = state.tensors().len();
    if tensors.len() != expected {
        return Err(NnError::Snapshot(format!(
            "snapshot holds {} tensors, network needs {expected}",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    for (params, buffers) in state.params.iter_mut().zip(state.buffers.iter_mut()) {
        for slot in params.iter_mut().chain(buffers.iter_mut()) {
            let t = it.next().expect("count checked");
            if t.shape() != slot.shape() {
                return Err(NnError::Snapshot(format!(
                    "tensor shape {:?} where {:?} was expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &[&t]).unwrap();
        let mut expected = b"MNCW1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_snapshot(&buf[..]).unwrap(), vec![t]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_snapshot(&b"MNCW2"[..]).is_err());
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &[&t]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_snapshot(&buf[..]).is_err());
    }
}
