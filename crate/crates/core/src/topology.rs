//! Node hardware layout and rank affinity planning.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("{ranks} ranks requested but the node has only {gcds} GCDs")]
    Capacity { ranks: usize, gcds: usize },
    #[error("unknown CCX {0}")]
    UnknownCcx(u32),
    #[error("unknown GCD {0}")]
    UnknownGcd(u32),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Lumi,
    Dardel,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lumi" => Ok(Profile::Lumi),
            "dardel" => Ok(Profile::Dardel),
            other => Err(format!("unknown node profile '{other}' (expected lumi or dardel)")),
        }
    }
}

/// How ranks are matched to their affine GCD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reorder {
    /// Rank i drives GCD i; ranks are placed on the CCX affine to it.
    RankToCcx,
    /// Rank i sits on CCX i; the visible GCD id is remapped per rank.
    GpuIds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ccx {
    pub id: u32,
    pub cores: Vec<u32>,
    pub smt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcdLink {
    /// Both dies sit in the same package.
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumaDistance {
    Affine,
    NonAffine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTopology {
    pub name: String,
    pub ccx_list: Vec<Ccx>,
    pub gcd_list: Vec<u32>,
    pub nic_list: Vec<u32>,
    /// Indexed by CCX position in `ccx_list`.
    pub ccx_gcd_affinity: Vec<u32>,
    /// Indexed by GCD id.
    pub gcd_nic: Vec<u32>,
    /// Package index per GCD id; dies in the same package are `Near`.
    pub gcd_module: Vec<u32>,
    pub reserved_core_per_ccx: bool,
    /// Offset added to a core id to get its SMT sibling.
    pub smt_sibling_offset: u32,
    pub reorder: Reorder,
}

/// CCX → GCD table of the EX235a blade. Only the CCX 0 → GCD 4 → NIC 2 chain
/// is pinned by public documentation; the rest is a fixed bijection.
const EX235A_CCX_GCD: [u32; 8] = [4, 5, 2, 3, 6, 7, 0, 1];

pub fn build_ex235a(profile: Profile) -> NodeTopology {
    let smt = matches!(profile, Profile::Dardel);
    let ccx_list = (0..8)
        .map(|c| Ccx {
            id: c,
            cores: (c * 8..c * 8 + 8).collect(),
            smt,
        })
        .collect();
    NodeTopology {
        name: match profile {
            Profile::Lumi => "ex235a-lumi".into(),
            Profile::Dardel => "ex235a-dardel".into(),
        },
        ccx_list,
        gcd_list: (0..8).collect(),
        nic_list: (0..4).collect(),
        ccx_gcd_affinity: EX235A_CCX_GCD.to_vec(),
        gcd_nic: (0..8).map(|g| g / 2).collect(),
        gcd_module: (0..8).map(|g| g / 2).collect(),
        reserved_core_per_ccx: matches!(profile, Profile::Lumi),
        smt_sibling_offset: 64,
        reorder: match profile {
            Profile::Lumi => Reorder::RankToCcx,
            Profile::Dardel => Reorder::GpuIds,
        },
    }
}

impl NodeTopology {
    /// Single CCX with `cores` cores wired to GCD 0 and NIC 0.
    pub fn toy(cores: u32) -> NodeTopology {
        NodeTopology {
            name: "toy".into(),
            ccx_list: vec![Ccx {
                id: 0,
                cores: (0..cores).collect(),
                smt: false,
            }],
            gcd_list: vec![0],
            nic_list: vec![0],
            ccx_gcd_affinity: vec![0],
            gcd_nic: vec![0],
            gcd_module: vec![0],
            reserved_core_per_ccx: false,
            smt_sibling_offset: 0,
            reorder: Reorder::RankToCcx,
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |m: String| Err(TopologyError::Invalid(m));
        if self.ccx_gcd_affinity.len() != self.ccx_list.len() {
            return bad("ccx_gcd_affinity length differs from CCX count".into());
        }
        let gcds: BTreeSet<u32> = self.gcd_list.iter().copied().collect();
        if gcds.len() != self.gcd_list.len() {
            return bad("duplicate GCD ids".into());
        }
        if self.ccx_gcd_affinity.iter().any(|g| !gcds.contains(g)) {
            return bad("CCX mapped to unknown GCD".into());
        }
        if self.ccx_list.len() == self.gcd_list.len() {
            let image: BTreeSet<u32> = self.ccx_gcd_affinity.iter().copied().collect();
            if image.len() != self.gcd_list.len() {
                return bad("CCX to GCD map is not a bijection".into());
            }
        }
        let max_gcd = self.gcd_list.iter().copied().max().unwrap_or(0) as usize;
        if self.gcd_nic.len() <= max_gcd || self.gcd_module.len() <= max_gcd {
            return bad("every GCD needs a NIC and a module entry".into());
        }
        let nics: BTreeSet<u32> = self.nic_list.iter().copied().collect();
        if self.gcd_list.iter().any(|&g| !nics.contains(&self.gcd_nic[g as usize])) {
            return bad("GCD mapped to unknown NIC".into());
        }
        let mut seen = BTreeSet::new();
        for ccx in &self.ccx_list {
            if ccx.cores.is_empty() {
                return bad(format!("CCX {} has no cores", ccx.id));
            }
            for &c in &ccx.cores {
                if !seen.insert(c) {
                    return bad(format!("core {c} appears twice"));
                }
            }
        }
        Ok(())
    }

    fn ccx_index(&self, ccx: u32) -> Result<usize, TopologyError> {
        self.ccx_list.iter().position(|c| c.id == ccx).ok_or(TopologyError::UnknownCcx(ccx))
    }

    fn check_gcd(&self, gcd: u32) -> Result<(), TopologyError> {
        if self.gcd_list.contains(&gcd) {
            Ok(())
        } else {
            Err(TopologyError::UnknownGcd(gcd))
        }
    }

    pub fn gcd_of_ccx(&self, ccx: u32) -> Result<u32, TopologyError> {
        Ok(self.ccx_gcd_affinity[self.ccx_index(ccx)?])
    }

    pub fn ccx_of_gcd(&self, gcd: u32) -> Result<u32, TopologyError> {
        self.check_gcd(gcd)?;
        self.ccx_gcd_affinity
            .iter()
            .position(|&g| g == gcd)
            .map(|i| self.ccx_list[i].id)
            .ok_or(TopologyError::UnknownGcd(gcd))
    }

    pub fn nic_of_gcd(&self, gcd: u32) -> Result<u32, TopologyError> {
        self.check_gcd(gcd)?;
        Ok(self.gcd_nic[gcd as usize])
    }

    pub fn gcd_link(&self, a: u32, b: u32) -> Result<GcdLink, TopologyError> {
        self.check_gcd(a)?;
        self.check_gcd(b)?;
        Ok(if self.gcd_module[a as usize] == self.gcd_module[b as usize] {
            GcdLink::Near
        } else {
            GcdLink::Far
        })
    }

    /// Cores the application may bind to.
    pub fn usable_cores(&self, ccx: u32) -> Result<Vec<u32>, TopologyError> {
        let c = &self.ccx_list[self.ccx_index(ccx)?];
        let skip = usize::from(self.reserved_core_per_ccx);
        Ok(c.cores.iter().skip(skip).copied().collect())
    }

    /// Hardware threads the application may bind to (cores plus SMT siblings).
    pub fn usable_hw_threads(&self, ccx: u32) -> Result<Vec<u32>, TopologyError> {
        let c = &self.ccx_list[self.ccx_index(ccx)?];
        let mut threads = self.usable_cores(ccx)?;
        if c.smt {
            let siblings: Vec<u32> = threads.iter().map(|t| t + self.smt_sibling_offset).collect();
            threads.extend(siblings);
        }
        Ok(threads)
    }

    pub fn reserved_cores(&self) -> Vec<u32> {
        if !self.reserved_core_per_ccx {
            return Vec::new();
        }
        self.ccx_list.iter().map(|c| c.cores[0]).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TopologyError> {
        let topo: NodeTopology = toml::from_str(text).map_err(|e| TopologyError::Invalid(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }
}

pub fn numa_distance(topo: &NodeTopology, ccx: u32, gcd: u32) -> Result<NumaDistance, TopologyError> {
    topo.check_gcd(gcd)?;
    Ok(if topo.gcd_of_ccx(ccx)? == gcd {
        NumaDistance::Affine
    } else {
        NumaDistance::NonAffine
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBinding {
    pub rank: u32,
    pub ccx: u32,
    /// Hardware thread ids the rank's threads are bound to.
    pub cores: Vec<u32>,
    pub gcd: u32,
    pub nic: u32,
    pub visible_devices: Vec<u32>,
    pub env: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinityPlan {
    pub topology: String,
    pub ranks: Vec<RankBinding>,
}

pub fn plan_affinity(topo: &NodeTopology, ranks: usize) -> Result<AffinityPlan, TopologyError> {
    topo.validate()?;
    if ranks > topo.gcd_list.len() || ranks > topo.ccx_list.len() {
        return Err(TopologyError::Capacity {
            ranks,
            gcds: topo.gcd_list.len().min(topo.ccx_list.len()),
        });
    }
    let mut bindings = Vec::with_capacity(ranks);
    let mut sorted_gcds = topo.gcd_list.clone();
    sorted_gcds.sort_unstable();
    for rank in 0..ranks {
        let (ccx, gcd) = match topo.reorder {
            Reorder::RankToCcx => {
                let gcd = sorted_gcds[rank];
                (topo.ccx_of_gcd(gcd)?, gcd)
            }
            Reorder::GpuIds => {
                let ccx = topo.ccx_list[rank].id;
                (ccx, topo.gcd_of_ccx(ccx)?)
            }
        };
        let cores = topo.usable_hw_threads(ccx)?;
        let nic = topo.nic_of_gcd(gcd)?;
        let env = vec![
            ("ROCR_VISIBLE_DEVICES".to_string(), gcd.to_string()),
            ("OMP_PLACES".to_string(), "cores".to_string()),
            ("OMP_PROC_BIND".to_string(), "close".to_string()),
            ("MPICH_OFI_NIC_POLICY".to_string(), "GPU".to_string()),
        ];
        bindings.push(RankBinding {
            rank: rank as u32,
            ccx,
            cores,
            gcd,
            nic,
            visible_devices: vec![gcd],
            env,
        });
    }
    Ok(AffinityPlan {
        topology: topo.name.clone(),
        ranks: bindings,
    })
}

impl AffinityPlan {
    /// Checks the plan's structural invariants against its topology.
    pub fn check(&self, topo: &NodeTopology) -> Result<(), String> {
        let reserved: BTreeSet<u32> = topo.reserved_cores().into_iter().collect();
        let mut used = BTreeSet::new();
        for b in &self.ranks {
            if b.visible_devices != vec![b.gcd] {
                return Err(format!("rank {} sees {:?}", b.rank, b.visible_devices));
            }
            if numa_distance(topo, b.ccx, b.gcd).map_err(|e| e.to_string())? != NumaDistance::Affine {
                return Err(format!("rank {} GCD {} not affine to CCX {}", b.rank, b.gcd, b.ccx));
            }
            if topo.nic_of_gcd(b.gcd).map_err(|e| e.to_string())? != b.nic {
                return Err(format!("rank {} NIC mismatch", b.rank));
            }
            if b.cores.is_empty() {
                return Err(format!("rank {} has no cores", b.rank));
            }
            for &c in &b.cores {
                if reserved.contains(&c) {
                    return Err(format!("rank {} bound to reserved core {c}", b.rank));
                }
                if !used.insert(c) {
                    return Err(format!("core {c} bound to two ranks"));
                }
            }
        }
        Ok(())
    }

    /// Launcher-style `mask_cpu:` list, one hex mask per rank.
    pub fn cpu_bind_masks(&self) -> String {
        let masks: Vec<String> = self
            .ranks
            .iter()
            .map(|b| {
                let max = b.cores.iter().copied().max().unwrap_or(0) as usize;
                let mut bits = vec![0u8; max / 4 + 1];
                for &c in &b.cores {
                    bits[c as usize / 4] |= 1 << (c % 4);
                }
                let hex: String = bits.iter().rev().map(|nib| format!("{nib:x}")).collect();
                let trimmed = hex.trim_start_matches('0');
                format!("0x{}", if trimmed.is_empty() { "0" } else { trimmed })
            })
            .collect();
        format!("mask_cpu:{}", masks.join(","))
    }

    /// Per-rank environment assignments, `rank N: KEY=VALUE ...`.
    pub fn env_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.ranks {
            let vars: Vec<String> = b.env.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "rank {}: {}", b.rank, vars.join(" "));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}
