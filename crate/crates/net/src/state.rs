//! Model snapshots and the binary checkpoint format.
//!
//! Layout: `b"MDS1"`, `u32` version, `u32` descriptor length, the JSON
//! descriptor (architecture plus tensor names, shapes and roles), then every
//! tensor as little-endian `f32` in descriptor order. All integers are
//! little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::layers::{Role, Tensors};
use crate::network::{Arch, Network};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MDS1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub data: Vec<f32>,
}

/// Parameters and batch-norm statistics of a network, with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    role: Role,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Arch,
    tensors: Vec<TensorMeta>,
}

impl ModelState {
    pub fn same_layout(&self, other: &ModelState) -> bool {
        self.arch == other.arch
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.role == b.role)
    }

    /// Concatenated values of every tensor, in order.
    pub fn flat(&self) -> Vec<f32> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = Descriptor {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&desc).expect("descriptor serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.flat().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(NetError::Length {
                expected: 12,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(NetError::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(NetError::Version(version));
        }
        let json_len = word(8) as usize;
        let json_end = 12usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(NetError::Length {
                expected: 12 + json_len,
                found: bytes.len(),
            })?;
        let desc: Descriptor = serde_json::from_slice(&bytes[12..json_end])
            .map_err(|e| NetError::Format(format!("descriptor: {e}")))?;
        let numel: usize = desc
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let payload = &bytes[json_end..];
        if payload.len() != 4 * numel {
            return Err(NetError::Length {
                expected: 4 * numel,
                found: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut tensors = Vec::with_capacity(desc.tensors.len());
        for meta in desc.tensors {
            let n = meta.shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinitePayload(meta.name));
            }
            tensors.push(NamedTensor {
                name: meta.name,
                shape: meta.shape,
                role: meta.role,
                data,
            });
        }
        Ok(Self {
            arch: desc.arch,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> Network<T> {
    pub fn state(&self) -> ModelState {
        let tensors = self
            .slots_all()
            .into_iter()
            .map(|s| NamedTensor {
                name: s.name,
                shape: s.shape,
                role: s.role,
                data: s.value.iter().map(|v| v.f64() as f32).collect(),
            })
            .collect();
        ModelState {
            arch: self.arch().clone(),
            tensors,
        }
    }

    /// Overwrites every parameter and buffer from a state of the same layout.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        if &state.arch != self.arch() {
            return Err(NetError::ArchMismatch(format!(
                "state {:?} vs model {:?}",
                state.arch,
                self.arch()
            )));
        }
        let mut slots = Vec::new();
        self.slots_mut("", &mut slots);
        if slots.len() != state.tensors.len() {
            return Err(NetError::ArchMismatch(format!(
                "{} tensors in state, {} in model",
                state.tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(&state.tensors) {
            if slot.name != t.name || slot.value.len() != t.data.len() {
                return Err(NetError::ArchMismatch(format!(
                    "tensor {} vs {}",
                    slot.name, t.name
                )));
            }
            for (dst, &v) in slot.value.iter_mut().zip(&t.data) {
                *dst = T::of(v as f64);
            }
        }
        Ok(())
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        let mut net = Network::new(state.arch.clone(), 0)?;
        net.load_state(state)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Network<f32> {
        let arch = Arch::new(32, 1, 3).with_widths([2, 2, 3, 4]).with_fsm(2, 2);
        Network::new(arch, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let state = small().state();
        let bytes = state.to_bytes();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.to_bytes(), bytes);
        let net = Network::<f32>::from_state(&back).unwrap();
        assert_eq!(net.state(), state);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = small().state().to_bytes();
        assert!(matches!(
            ModelState::from_bytes(&bytes[..bytes.len() - 3]),
            Err(NetError::Length { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModelState::from_bytes(&bad),
            Err(NetError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(
            ModelState::from_bytes(&bad),
            Err(NetError::Version(7))
        ));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            ModelState::from_bytes(&bad),
            Err(NetError::NonFinitePayload(_))
        ));
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let state = small().state();
        let mut other = Network::<f32>::new(state.arch.clone().without_fsm(), 0).unwrap();
        assert!(matches!(
            other.load_state(&state),
            Err(NetError::ArchMismatch(_))
        ));
    }
}
