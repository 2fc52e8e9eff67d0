//! Alpha-beta cost model for CPU-initiated, GPU-aware MPI transfers and the
//! halo-exchange schedule fragments built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::KernelKind;
use crate::des::SimDuration;
use crate::pipeline::{queues, DepRef, StepItem, TaskTemplate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("no parameters for link class {0:?}")]
    UnknownLink(LinkClass),
    #[error("invalid link parameters for {link:?}: {reason}")]
    Invalid { link: LinkClass, reason: String },
    #[error("cannot decompose into {0} domains")]
    BadGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkClass {
    /// The two GCDs of one MI250X package.
    IntraGcdPair,
    IntraNode,
    InterNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub alpha_us: f64,
    pub bandwidth_gb_s: f64,
    pub provenance: String,
}

impl LinkParams {
    /// Inverse bandwidth in ns per byte.
    pub fn beta_ns_per_byte(&self) -> f64 {
        1.0 / self.bandwidth_gb_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub links: BTreeMap<LinkClass, LinkParams>,
    /// Host cost of posting or completing one MPI call, µs.
    pub mpi_call_us: f64,
    pub provenance: String,
}

impl CommModel {
    pub fn validate(&self) -> Result<(), CommError> {
        for (&link, p) in &self.links {
            if !(p.alpha_us >= 0.0) || !(p.bandwidth_gb_s > 0.0) {
                return Err(CommError::Invalid {
                    link,
                    reason: "alpha must be non-negative and bandwidth positive".into(),
                });
            }
        }
        if let (Some(intra), Some(inter)) = (self.links.get(&LinkClass::IntraNode), self.links.get(&LinkClass::InterNode)) {
            if inter.alpha_us < intra.alpha_us {
                return Err(CommError::Invalid {
                    link: LinkClass::InterNode,
                    reason: "inter-node latency below intra-node latency".into(),
                });
            }
        }
        if !(self.mpi_call_us >= 0.0) {
            return Err(CommError::Invalid {
                link: LinkClass::IntraNode,
                reason: "MPI call cost must be non-negative".into(),
            });
        }
        Ok(())
    }

    pub fn params(&self, link: LinkClass) -> Result<&LinkParams, CommError> {
        self.links.get(&link).ok_or(CommError::UnknownLink(link))
    }

    /// `alpha + beta·bytes`.
    pub fn transfer_time(&self, bytes: u64, link: LinkClass) -> Result<SimDuration, CommError> {
        let p = self.params(link)?;
        Ok(SimDuration::from_ns_f64(p.alpha_us * 1e3 + bytes as f64 * p.beta_ns_per_byte()))
    }

    /// Every cost set to zero, keeping the link table shape.
    pub fn free(&self) -> CommModel {
        let mut m = self.clone();
        for p in m.links.values_mut() {
            p.alpha_us = 0.0;
            p.bandwidth_gb_s = f64::INFINITY;
        }
        m.mpi_call_us = 0.0;
        m
    }
}

/// Most cubic factorization of `n` domains into `[nx, ny, nz]` with
/// `nx ≥ ny ≥ nz`, minimizing the summed face count of a cubic box.
pub fn dd_grid(n: usize) -> Result<[usize; 3], CommError> {
    if n == 0 {
        return Err(CommError::BadGrid(n));
    }
    let mut best = [n, 1, 1];
    for nz in 1..=n {
        if !n.is_multiple_of(nz) {
            continue;
        }
        for ny in nz..=n / nz {
            if !(n / nz).is_multiple_of(ny) {
                continue;
            }
            let nx = n / nz / ny;
            if nx < ny {
                continue;
            }
            if nx + ny + nz < best.iter().sum::<usize>() {
                best = [nx, ny, nz];
            }
        }
    }
    Ok(best)
}

/// Halo sizes for one domain of a cubic box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaloSpec {
    /// Halo atoms over local atoms, summed over dimensions and pulses.
    pub halo_atom_fraction: f64,
    pub bytes_per_atom_coords: u64,
    pub bytes_per_atom_forces: u64,
    /// Pulses per decomposed dimension, in communication order.
    pub pulses_per_dim: Vec<u32>,
    /// Share of the halo carried by each decomposed dimension.
    pub dim_shares: Vec<f64>,
}

impl HaloSpec {
    /// Geometric halo of a domain from grid `grid` in a cubic box holding
    /// `atoms` at `density` atoms/nm³ with cutoff `rc` nm. Later dimensions
    /// also carry the corners of the earlier ones.
    pub fn geometric(grid: [usize; 3], atoms: u64, density: f64, rc: f64) -> HaloSpec {
        let box_nm = (atoms as f64 / density).cbrt();
        let side: Vec<f64> = grid.iter().map(|&n| box_nm / n as f64).collect();
        let local_vol: f64 = side.iter().product();
        let mut pulses = Vec::new();
        let mut volumes = Vec::new();
        let mut extent = side.clone();
        for d in 0..3 {
            if grid[d] < 2 {
                continue;
            }
            let p = (rc / side[d]).ceil().max(1.0) as u32;
            let others: f64 = (0..3).filter(|&j| j != d).map(|j| extent[j]).product();
            volumes.push(rc * others);
            pulses.push(p);
            extent[d] += rc;
        }
        let total: f64 = volumes.iter().sum();
        HaloSpec {
            halo_atom_fraction: if local_vol > 0.0 { total / local_vol } else { 0.0 },
            bytes_per_atom_coords: 12,
            bytes_per_atom_forces: 12,
            pulses_per_dim: pulses,
            dim_shares: if total > 0.0 { volumes.iter().map(|v| v / total).collect() } else { Vec::new() },
        }
    }

    /// Halo atoms moved by one pulse of decomposed dimension `k`.
    pub fn pulse_atoms(&self, k: usize, local_atoms: u64) -> u64 {
        let share = self.dim_shares.get(k).copied().unwrap_or(0.0);
        let pulses = self.pulses_per_dim.get(k).copied().unwrap_or(1).max(1);
        (self.halo_atom_fraction * share * local_atoms as f64 / pulses as f64).round() as u64
    }

    pub fn total_halo_atoms(&self, local_atoms: u64) -> u64 {
        (0..self.dim_shares.len())
            .map(|k| self.pulse_atoms(k, local_atoms) * self.pulses_per_dim[k].max(1) as u64)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaloPhase {
    Coords,
    Forces,
}

/// Neighbours of one rank along one decomposed dimension. Coordinates go to
/// `send_to` and come from `recv_from`; forces travel the other way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloNeighbors {
    pub send_to: usize,
    pub recv_from: usize,
    pub link: LinkClass,
}

/// Message tag of one halo pulse, unique within a step.
pub fn halo_tag(phase: HaloPhase, dim: usize, pulse: u32) -> u32 {
    let p = match phase {
        HaloPhase::Coords => 0,
        HaloPhase::Forces => 1,
    };
    0x100 | (p << 7) | ((dim as u32) << 4) | pulse.min(15)
}

/// Label of the last task of a halo phase, or `None` without neighbours.
pub fn halo_last_label(phase: HaloPhase, spec: &HaloSpec) -> Option<String> {
    let n = spec.pulses_per_dim.len();
    if n == 0 {
        return None;
    }
    Some(match phase {
        HaloPhase::Coords => unpack_label(phase, n - 1, spec.pulses_per_dim[n - 1].max(1) - 1),
        HaloPhase::Forces => unpack_label(phase, 0, 0),
    })
}

fn pack_label(phase: HaloPhase, k: usize, p: u32) -> String {
    match phase {
        HaloPhase::Coords => format!("pack_x{k}.{p}"),
        HaloPhase::Forces => format!("pack_f{k}.{p}"),
    }
}

fn unpack_label(phase: HaloPhase, k: usize, p: u32) -> String {
    match phase {
        HaloPhase::Coords => format!("unpack_x{k}.{p}"),
        HaloPhase::Forces => format!("unpack_f{k}.{p}"),
    }
}

/// Step items of one halo phase for a rank: per pulse a pack kernel, a host
/// sync on it, the send and receive, and an unpack kernel. Coordinates walk
/// the dimensions forward, forces backward. `input` gates the first pack.
pub fn halo_exchange(phase: HaloPhase, spec: &HaloSpec, neighbors: &[HaloNeighbors], local_atoms: u64, input: &[DepRef]) -> Vec<StepItem> {
    let mut items = Vec::new();
    let dims = spec.pulses_per_dim.len().min(neighbors.len());
    let mut order: Vec<(usize, u32)> = Vec::new();
    for k in 0..dims {
        for p in 0..spec.pulses_per_dim[k].max(1) {
            order.push((k, p));
        }
    }
    if phase == HaloPhase::Forces {
        order.reverse();
    }
    let bytes_per_atom = match phase {
        HaloPhase::Coords => spec.bytes_per_atom_coords,
        HaloPhase::Forces => spec.bytes_per_atom_forces,
    };
    let mut prev: Option<String> = None;
    for (k, p) in order {
        let atoms = spec.pulse_atoms(k, local_atoms);
        let nb = &neighbors[k];
        let (to, from) = match phase {
            HaloPhase::Coords => (nb.send_to, nb.recv_from),
            HaloPhase::Forces => (nb.recv_from, nb.send_to),
        };
        let pack = pack_label(phase, k, p);
        let deps = match &prev {
            Some(l) => vec![DepRef::Item(l.clone())],
            None => input.to_vec(),
        };
        items.push(StepItem::Task(TaskTemplate::new(&pack, KernelKind::HaloPackUnpack, atoms, queues::NONLOCAL, deps)));
        items.push(StepItem::Sync(pack.clone()));
        let tag = halo_tag(phase, k, p);
        items.push(StepItem::Send {
            to,
            tag,
            bytes: atoms * bytes_per_atom,
            link: nb.link,
            blocking: false,
        });
        items.push(StepItem::Recv { from, tag });
        let unpack = unpack_label(phase, k, p);
        items.push(StepItem::Task(TaskTemplate::new(
            &unpack,
            KernelKind::HaloPackUnpack,
            atoms,
            queues::NONLOCAL,
            vec![DepRef::Item(pack)],
        )));
        prev = Some(unpack);
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CommModel {
        crate::config::bundled().cal.comm.clone()
    }

    #[test]
    fn zero_bytes_cost_alpha() {
        let m = model();
        let a = m.params(LinkClass::InterNode).unwrap().alpha_us;
        assert_eq!(m.transfer_time(0, LinkClass::InterNode).unwrap(), SimDuration::from_us_f64(a));
    }

    #[test]
    fn linear_without_alpha() {
        let mut m = model();
        for p in m.links.values_mut() {
            p.alpha_us = 0.0;
        }
        let one = m.transfer_time(1 << 20, LinkClass::IntraNode).unwrap().as_ns();
        let two = m.transfer_time(2 << 20, LinkClass::IntraNode).unwrap().as_ns();
        assert!(two.abs_diff(2 * one) <= 1, "{two} vs 2 x {one}");
    }

    #[test]
    fn shipped_defaults() {
        let m = model();
        m.validate().unwrap();
        assert!(m.params(LinkClass::InterNode).unwrap().alpha_us >= m.params(LinkClass::IntraNode).unwrap().alpha_us);
    }

    #[test]
    fn grid_is_most_cubic() {
        assert_eq!(dd_grid(1).unwrap(), [1, 1, 1]);
        assert_eq!(dd_grid(2).unwrap(), [2, 1, 1]);
        assert_eq!(dd_grid(4).unwrap(), [2, 2, 1]);
        assert_eq!(dd_grid(8).unwrap(), [2, 2, 2]);
        assert_eq!(dd_grid(7).unwrap(), [7, 1, 1]);
        assert_eq!(dd_grid(4096).unwrap(), [16, 16, 16]);
        assert_eq!(dd_grid(2048).unwrap(), [16, 16, 8]);
        assert!(dd_grid(0).is_err());
    }

    #[test]
    fn geometric_halo_slab() {
        // Two domains along x: one slab of thickness rc over a box face.
        let atoms = 1_000_000u64;
        let spec = HaloSpec::geometric([2, 1, 1], atoms, 100.0, 1.2);
        let box_nm = (atoms as f64 / 100.0).cbrt();
        let expected = 1.2 / (box_nm / 2.0);
        assert!((spec.halo_atom_fraction - expected).abs() < 1e-12);
        assert_eq!(spec.pulses_per_dim, vec![1]);
        assert_eq!(spec.dim_shares, vec![1.0]);
        // Thin domains need more pulses.
        let thin = HaloSpec::geometric([64, 1, 1], 100_000, 100.0, 1.2);
        assert!(thin.pulses_per_dim[0] >= 2);
    }

    #[test]
    fn single_rank_has_no_halo() {
        let spec = HaloSpec::geometric([1, 1, 1], 1000, 100.0, 1.2);
        assert!(spec.pulses_per_dim.is_empty());
        assert!(halo_exchange(HaloPhase::Coords, &spec, &[], 1000, &[]).is_empty());
        assert!(halo_last_label(HaloPhase::Forces, &spec).is_none());
    }

    fn syncs(items: &[StepItem]) -> usize {
        items.iter().filter(|i| matches!(i, StepItem::Sync(_))).count()
    }

    #[test]
    fn one_dimension_one_sync_per_phase() {
        let spec = HaloSpec::geometric([2, 1, 1], 100_000, 100.0, 1.2);
        let nb = [HaloNeighbors {
            send_to: 1,
            recv_from: 1,
            link: LinkClass::IntraGcdPair,
        }];
        let x = halo_exchange(HaloPhase::Coords, &spec, &nb, 50_000, &[]);
        let f = halo_exchange(HaloPhase::Forces, &spec, &nb, 50_000, &[]);
        assert_eq!(syncs(&x) + syncs(&f), 2);
    }

    #[test]
    fn two_dimensions_two_exchanges_per_phase() {
        let spec = HaloSpec::geometric([2, 2, 1], 400_000, 100.0, 1.2);
        let nb = [
            HaloNeighbors {
                send_to: 1,
                recv_from: 1,
                link: LinkClass::IntraNode,
            },
            HaloNeighbors {
                send_to: 2,
                recv_from: 2,
                link: LinkClass::IntraNode,
            },
        ];
        let x = halo_exchange(HaloPhase::Coords, &spec, &nb, 100_000, &[]);
        assert_eq!(syncs(&x), 2);
        let sends: Vec<usize> = x
            .iter()
            .filter_map(|i| match i {
                StepItem::Send { to, .. } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(sends, vec![1, 2]);
        let f = halo_exchange(HaloPhase::Forces, &spec, &nb, 100_000, &[]);
        let sends: Vec<usize> = f
            .iter()
            .filter_map(|i| match i {
                StepItem::Send { to, .. } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(sends, vec![2, 1]);
        assert_eq!(halo_last_label(HaloPhase::Forces, &spec).unwrap(), "unpack_f0.0");
    }

    #[test]
    fn later_dimensions_carry_corners() {
        let spec = HaloSpec::geometric([2, 2, 2], 1_000_000, 100.0, 1.2);
        assert_eq!(spec.dim_shares.len(), 3);
        assert!(spec.dim_shares[0] < spec.dim_shares[1]);
        assert!(spec.dim_shares[1] < spec.dim_shares[2]);
    }
}
