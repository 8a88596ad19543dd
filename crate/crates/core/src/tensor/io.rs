//! Weight checkpoint files.
//!
//! Layout: the magic string `RLW1`, then one record per parameter:
//! name length (u64 LE), name bytes (UTF-8), rank (u64 LE), dims
//! (u64 LE each), values (f32 LE each, row-major). Records run to
//! end of file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RLW1";
const MAX_RANK: u64 = 8;

pub fn write_checkpoint<W: Write, E: Real>(
    mut out: W,
    params: &[(String, &Tensor<E>)],
) -> io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u64).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, E: Real>(mut input: R) -> Result<Vec<(String, Tensor<E>)>, TensorError> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut params = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match input.read(&mut len_buf[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => return Err(TensorError::Checkpoint(format!("read error: {e}"))),
        }
        read_exact(&mut input, &mut len_buf[1..], "name length")?;
        let name_len = u64::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(TensorError::Checkpoint(format!("name length {name_len} is implausible")));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut input, &mut name_buf, "name bytes")?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| TensorError::Checkpoint(format!("name is not UTF-8: {e}")))?;

        let rank = read_u64(&mut input, "rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!("parameter {name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut input, "dimension")?;
            if d == 0 {
                return Err(TensorError::Checkpoint(format!("parameter {name}: zero dimension")));
            }
            count = count.saturating_mul(d);
            shape.push(d as usize);
        }
        if count > (1 << 32) {
            return Err(TensorError::Checkpoint(format!("parameter {name}: {count} values is implausible")));
        }
        let mut data = Vec::with_capacity(count as usize);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            read_exact(&mut input, &mut buf, "value")?;
            data.push(E::from_f64(f32::from_le_bytes(buf) as f64));
        }
        let tensor = Tensor::new(shape, data)?;
        params.push((name, tensor));
    }
    Ok(params)
}

pub fn write_checkpoint_file<E: Real>(
    path: &Path,
    params: &[(String, &Tensor<E>)],
) -> io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut writer, params)?;
    writer.flush()
}

pub fn read_checkpoint_file<E: Real>(path: &Path) -> Result<Vec<(String, Tensor<E>)>, TensorError> {
    let file = File::open(path)
        .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    input
        .read_exact(buf)
        .map_err(|e| TensorError::Checkpoint(format!("truncated while reading {what}: {e}")))
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64, TensorError> {
    let mut buf = [0u8; 8];
    read_exact(input, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
