//! Binary trajectory files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            6 bytes   b"TWTRJ\0"
//! format_version   u32
//! name_len         u32       followed by that many UTF-8 bytes
//! n_atoms          u64
//! dimension        u32
//! spacing          u64       integrator steps between stored frames
//! dt               f64
//! friction         f64
//! temperature      f64
//! n_frames         u64
//! frames           n_frames * n_atoms * dimension f64, row-major per frame
//! ```

use super::{DynamicsError, LangevinParams, Trajectory};
use crate::core::SystemSpec;
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 6] = b"TWTRJ\0";

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), DynamicsError> {
    let io_err = |e: std::io::Error| DynamicsError::Io(e.to_string());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&TRAJECTORY_FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    let name = traj.system.name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(name).map_err(io_err)?;
    w.write_all(&(traj.system.n_atoms as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(traj.system.dimension as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(traj.spacing as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&traj.params.dt.to_le_bytes()).map_err(io_err)?;
    w.write_all(&traj.params.friction.to_le_bytes()).map_err(io_err)?;
    w.write_all(&traj.params.temperature.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(traj.frames.len() as u64).to_le_bytes()).map_err(io_err)?;
    for frame in &traj.frames {
        for v in frame.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a trajectory written by [`write_trajectory`]. The system spec is
/// re-attached from the caller (the file stores the name for a
/// consistency check, not the full topology).
pub fn read_trajectory(path: &Path, system: Arc<SystemSpec>) -> Result<Trajectory, DynamicsError> {
    let io_err = |e: std::io::Error| DynamicsError::Io(e.to_string());
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(DynamicsError::Io(format!("{}: not a trajectory file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != TRAJECTORY_FORMAT_VERSION {
        return Err(DynamicsError::Io(format!("unsupported trajectory version {version}")));
    }
    let name_len = read_u32(&mut r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(io_err)?;
    let name = String::from_utf8(name).map_err(|e| DynamicsError::Io(e.to_string()))?;
    if name != system.name {
        return Err(DynamicsError::Io(format!(
            "trajectory belongs to system `{name}`, not `{}`",
            system.name
        )));
    }
    let n_atoms = read_u64(&mut r)? as usize;
    let dimension = read_u32(&mut r)? as usize;
    if n_atoms != system.n_atoms || dimension != system.dimension {
        return Err(DynamicsError::Io(format!(
            "trajectory shape {n_atoms}x{dimension} does not match system spec"
        )));
    }
    let spacing = read_u64(&mut r)? as usize;
    let dt = read_f64(&mut r)?;
    let friction = read_f64(&mut r)?;
    let temperature = read_f64(&mut r)?;
    let n_frames = read_u64(&mut r)? as usize;
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![0u8; n_atoms * dimension * 8];
    for _ in 0..n_frames {
        r.read_exact(&mut buf).map_err(io_err)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(
            Array2::from_shape_vec((n_atoms, dimension), values)
                .map_err(|e| DynamicsError::Io(e.to_string()))?,
        );
    }
    Ok(Trajectory {
        frames,
        spacing,
        params: LangevinParams { dt, friction, temperature },
        system,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DynamicsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| DynamicsError::Io(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DynamicsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| DynamicsError::Io(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, DynamicsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| DynamicsError::Io(e.to_string()))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::RngStream;

    #[test]
    fn round_trip_is_bitwise() {
        let system = Arc::new(SystemSpec::point_system("io", 3, 2));
        let mut rng = RngStream::new(40, 0);
        let traj = Trajectory {
            frames: (0..5).map(|_| rng.normal_matrix(3, 2)).collect(),
            spacing: 7,
            params: LangevinParams { dt: 0.01, friction: 0.3, temperature: 1.5 },
            system: system.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.twtrj");
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path, system).unwrap();
        assert_eq!(back.spacing, traj.spacing);
        assert_eq!(back.params, traj.params);
        assert_eq!(back.frames.len(), traj.frames.len());
        for (a, b) in traj.frames.iter().zip(&back.frames) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_system_rejected() {
        let system = Arc::new(SystemSpec::point_system("a", 2, 1));
        let other = Arc::new(SystemSpec::point_system("b", 2, 1));
        let traj = Trajectory {
            frames: vec![Array2::zeros((2, 1))],
            spacing: 1,
            params: LangevinParams { dt: 0.01, friction: 0.3, temperature: 1.0 },
            system,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.twtrj");
        write_trajectory(&path, &traj).unwrap();
        assert!(read_trajectory(&path, other).is_err());
    }
}
