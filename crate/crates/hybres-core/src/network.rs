//! Network model: admittance assembly, Kron reduction of passive buses, and
//! the mixed voltage/current-source partition matrices consumed by every
//! downstream equation.
//!
//! The reduced network is always ordered grid = 0, GFM = 1, GFL = 2 so that
//! matrix element (i, j) of the partition matrices lines up with the angle
//! conventions used by the algebraic and analysis modules.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type C = Complex64;
/// Dense 3×3 complex matrix in reduced (grid, gfm, gfl) ordering.
pub type Mat3 = [[C; 3]; 3];

/// Reduced-network row/column index of the stiff-grid bus.
pub const GRID: usize = 0;
/// Reduced-network row/column index of the grid-forming converter bus.
pub const GFM: usize = 1;
/// Reduced-network row/column index of the grid-following converter bus.
pub const GFL: usize = 2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("branch references unknown bus id {0}")]
    UnknownBus(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("branch {from}-{to} has zero impedance")]
    ZeroImpedance { from: usize, to: usize },
    #[error("model must contain exactly one {0} bus, found {1}")]
    RoleCount(&'static str, usize),
    #[error("passive sub-block is singular (isolated or degenerate passive bus)")]
    SingularPassiveBlock,
    #[error("partition sub-block is singular (ill-posed source partition)")]
    SingularPartitionBlock,
    #[error("partition node sets must disjointly cover {{0, 1, 2}}")]
    BadPartition,
    #[error("fault bus id {0} does not exist")]
    FaultBusUnknown(usize),
    #[error("fault resistance must be positive, got {0}")]
    FaultResistance(f64),
    #[error("fault clear time {clear} must be later than start time {start}")]
    FaultWindow { start: f64, clear: f64 },
}

/// Role of a bus in the three-machine template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    /// Stiff AC grid: ideal voltage source of magnitude `u_sys`.
    Grid,
    /// Grid-forming converter: voltage source in NC, current source in CS.
    Gfm,
    /// Grid-following converter: always a current source.
    Gfl,
    /// Passive bus, eliminated by Kron reduction.
    Passive,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
}

/// Series branch between two buses, impedance in p.u.
#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub z: C,
}

/// Shunt admittance to ground at a bus, in p.u.
#[derive(Debug, Clone)]
pub struct Shunt {
    pub bus: usize,
    pub y: C,
}

#[derive(Debug, Clone, Copy)]
pub struct BaseQuantities {
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    pub f_base_hz: f64,
}

impl BaseQuantities {
    /// Impedance base in ohms: V²/S.
    pub fn z_base_ohm(&self) -> f64 {
        self.v_base_kv * self.v_base_kv / self.s_base_mva
    }
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub shunts: Vec<Shunt>,
    pub base: BaseQuantities,
    /// Grid bus voltage magnitude, p.u.
    pub u_sys: f64,
}

/// Indices (into `buses`) of the three active buses and the passive rest.
#[derive(Debug, Clone)]
pub struct ActiveRoles {
    pub grid: usize,
    pub gfm: usize,
    pub gfl: usize,
    pub passive: Vec<usize>,
}

impl NetworkModel {
    fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Referential integrity and nonzero impedances; does not require the
    /// three-machine role structure.
    pub fn validate_structure(&self) -> Result<(), NetworkError> {
        for (k, b) in self.buses.iter().enumerate() {
            if self.buses[..k].iter().any(|o| o.id == b.id) {
                return Err(NetworkError::DuplicateBusId(b.id));
            }
        }
        for br in &self.branches {
            if self.index_of(br.from).is_none() {
                return Err(NetworkError::UnknownBus(br.from));
            }
            if self.index_of(br.to).is_none() {
                return Err(NetworkError::UnknownBus(br.to));
            }
            if br.z.norm() == 0.0 {
                return Err(NetworkError::ZeroImpedance {
                    from: br.from,
                    to: br.to,
                });
            }
        }
        for sh in &self.shunts {
            if self.index_of(sh.bus).is_none() {
                return Err(NetworkError::UnknownBus(sh.bus));
            }
        }
        Ok(())
    }

    /// Locate the single grid, GFM and GFL buses required by the reduction
    /// pipeline.
    pub fn active_roles(&self) -> Result<ActiveRoles, NetworkError> {
        let find_one = |kind: BusKind, name: &'static str| -> Result<usize, NetworkError> {
            let hits: Vec<usize> = self
                .buses
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind == kind)
                .map(|(i, _)| i)
                .collect();
            if hits.len() == 1 {
                Ok(hits[0])
            } else {
                Err(NetworkError::RoleCount(name, hits.len()))
            }
        };
        Ok(ActiveRoles {
            grid: find_one(BusKind::Grid, "grid")?,
            gfm: find_one(BusKind::Gfm, "gfm")?,
            gfl: find_one(BusKind::Gfl, "gfl")?,
            passive: self
                .buses
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind == BusKind::Passive)
                .map(|(i, _)| i)
                .collect(),
        })
    }
}

/// Network stage selector: the fault shunt is present only during `Fault`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prefault,
    Fault,
    Postfault,
}

/// Fault description plus the stage being built. Prefault and postfault
/// matrices are identical unless the model itself changes between stages.
#[derive(Debug, Clone, Copy)]
pub struct FaultStage {
    pub stage: Stage,
    /// Faulted bus id (not index).
    pub bus: usize,
    /// Physical fault resistance in ohms; converted to p.u. on the system base.
    pub resistance_ohm: f64,
    pub t_start: f64,
    pub t_clear: f64,
}

impl FaultStage {
    pub fn validate(&self, model: &NetworkModel) -> Result<(), NetworkError> {
        if model.index_of(self.bus).is_none() {
            return Err(NetworkError::FaultBusUnknown(self.bus));
        }
        if self.resistance_ohm <= 0.0 {
            return Err(NetworkError::FaultResistance(self.resistance_ohm));
        }
        if self.t_clear <= self.t_start {
            return Err(NetworkError::FaultWindow {
                start: self.t_start,
                clear: self.t_clear,
            });
        }
        Ok(())
    }

    /// Same schedule, different stage selector.
    pub fn at_stage(&self, stage: Stage) -> FaultStage {
        FaultStage { stage, ..*self }
    }

    /// Fault shunt admittance in p.u.: Z_base / R_fault.
    pub fn shunt_pu(&self, base: &BaseQuantities) -> f64 {
        base.z_base_ohm() / self.resistance_ohm
    }
}

/// Assemble the full nodal admittance matrix in the model's bus order.
/// During the `Fault` stage the fault shunt is added to the faulted bus
/// diagonal.
pub fn build_admittance(
    model: &NetworkModel,
    fault: &FaultStage,
) -> Result<DMatrix<C>, NetworkError> {
    model.validate_structure()?;
    if fault.stage == Stage::Fault {
        fault.validate(model)?;
    }
    let n = model.buses.len();
    let mut y = DMatrix::<C>::zeros(n, n);
    for br in &model.branches {
        let i = model.index_of(br.from).unwrap();
        let j = model.index_of(br.to).unwrap();
        let ybr = C::new(1.0, 0.0) / br.z;
        y[(i, i)] += ybr;
        y[(j, j)] += ybr;
        y[(i, j)] -= ybr;
        y[(j, i)] -= ybr;
    }
    for sh in &model.shunts {
        let i = model.index_of(sh.bus).unwrap();
        y[(i, i)] += sh.y;
    }
    if fault.stage == Stage::Fault {
        let i = model.index_of(fault.bus).unwrap();
        y[(i, i)] += C::new(fault.shunt_pu(&model.base), 0.0);
    }
    Ok(y)
}

/// Eliminate the listed passive rows/columns by the Schur complement
/// Y_a − Y_b · Y_d⁻¹ · Y_c, preserving the relative order of the kept buses.
pub fn kron_reduce(y: &DMatrix<C>, passive: &[usize]) -> Result<DMatrix<C>, NetworkError> {
    let n = y.nrows();
    let keep: Vec<usize> = (0..n).filter(|i| !passive.contains(i)).collect();
    if passive.is_empty() {
        return Ok(y.clone());
    }
    let block = |rows: &[usize], cols: &[usize]| -> DMatrix<C> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| y[(rows[r], cols[c])])
    };
    let ya = block(&keep, &keep);
    let yb = block(&keep, passive);
    let yc = block(passive, &keep);
    let yd = block(passive, passive);
    let solved = yd
        .lu()
        .solve(&yc)
        .ok_or(NetworkError::SingularPassiveBlock)?;
    Ok(ya - yb * solved)
}

/// Build the source-partition matrix that maps (voltages at `v_nodes`,
/// currents at `i_nodes`) to (currents at `v_nodes`, voltages at `i_nodes`),
/// given the reduced admittance relation I = Y_r · U. Output rows/columns
/// are ordered `v_nodes` then `i_nodes`.
pub fn partition_matrix(
    yr: &Mat3,
    v_nodes: &[usize],
    i_nodes: &[usize],
) -> Result<Mat3, NetworkError> {
    let mut seen = [false; 3];
    for &k in v_nodes.iter().chain(i_nodes) {
        if k > 2 || seen[k] {
            return Err(NetworkError::BadPartition);
        }
        seen[k] = true;
    }
    if !(seen[0] && seen[1] && seen[2]) {
        return Err(NetworkError::BadPartition);
    }
    let nv = v_nodes.len();
    let ni = i_nodes.len();
    let block = |rows: &[usize], cols: &[usize]| -> DMatrix<C> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| yr[rows[r]][cols[c]])
    };
    let yra = block(v_nodes, v_nodes);
    let yrb = block(v_nodes, i_nodes);
    let yrc = block(i_nodes, v_nodes);
    let yrd = block(i_nodes, i_nodes);
    let yrd_lu = yrd.clone().lu();
    let yrd_inv = yrd_lu
        .try_inverse()
        .ok_or(NetworkError::SingularPartitionBlock)?;
    let tl = &yra - &yrb * &yrd_inv * &yrc;
    let tr = &yrb * &yrd_inv;
    let bl = -(&yrd_inv * &yrc);
    let br = yrd_inv;
    let mut m = [[C::new(0.0, 0.0); 3]; 3];
    for r in 0..nv {
        for c in 0..nv {
            m[r][c] = tl[(r, c)];
        }
        for c in 0..ni {
            m[r][nv + c] = tr[(r, c)];
        }
    }
    for r in 0..ni {
        for c in 0..nv {
            m[nv + r][c] = bl[(r, c)];
        }
        for c in 0..ni {
            m[nv + r][nv + c] = br[(r, c)];
        }
    }
    Ok(m)
}

/// Kron-reduced network for one stage, with both partition matrices and
/// their polar element caches.
#[derive(Debug, Clone)]
pub struct ReducedNetwork {
    /// Grid voltage magnitude, p.u.
    pub u_sys: f64,
    /// Reduced admittance, (grid, gfm, gfl) ordering.
    pub yr: Mat3,
    /// Partition with voltage sources {grid, gfm} and current source {gfl}.
    pub m_nc: Mat3,
    /// Partition with voltage source {grid} and current sources {gfm, gfl}.
    pub m_cs: Mat3,
    nc_mag: [[f64; 3]; 3],
    nc_ang: [[f64; 3]; 3],
    cs_mag: [[f64; 3]; 3],
    cs_ang: [[f64; 3]; 3],
}

impl ReducedNetwork {
    /// Reduce the model at the given stage into canonical (grid, gfm, gfl)
    /// ordering and form both partitions.
    pub fn build(model: &NetworkModel, fault: &FaultStage) -> Result<Self, NetworkError> {
        let roles = model.active_roles()?;
        let y = build_admittance(model, fault)?;
        // Permute so active buses come first in canonical order.
        let mut order = vec![roles.grid, roles.gfm, roles.gfl];
        order.extend(roles.passive.iter().copied());
        let n = order.len();
        let yp = DMatrix::from_fn(n, n, |r, c| y[(order[r], order[c])]);
        let passive_idx: Vec<usize> = (3..n).collect();
        let yr_d = kron_reduce(&yp, &passive_idx)?;
        let mut yr = [[C::new(0.0, 0.0); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                yr[r][c] = yr_d[(r, c)];
            }
        }
        let m_nc = partition_matrix(&yr, &[GRID, GFM], &[GFL])?;
        let m_cs = partition_matrix(&yr, &[GRID], &[GFM, GFL])?;
        let polar = |m: &Mat3| -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
            let mut mag = [[0.0; 3]; 3];
            let mut ang = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    mag[r][c] = m[r][c].norm();
                    ang[r][c] = m[r][c].arg();
                }
            }
            (mag, ang)
        };
        let (nc_mag, nc_ang) = polar(&m_nc);
        let (cs_mag, cs_ang) = polar(&m_cs);
        Ok(ReducedNetwork {
            u_sys: model.u_sys,
            yr,
            m_nc,
            m_cs,
            nc_mag,
            nc_ang,
            cs_mag,
            cs_ang,
        })
    }

    /// |M_NC(i,j)|
    pub fn nc_mag(&self, i: usize, j: usize) -> f64 {
        self.nc_mag[i][j]
    }
    /// arg M_NC(i,j)
    pub fn nc_ang(&self, i: usize, j: usize) -> f64 {
        self.nc_ang[i][j]
    }
    /// |M_CS(i,j)|
    pub fn cs_mag(&self, i: usize, j: usize) -> f64 {
        self.cs_mag[i][j]
    }
    /// arg M_CS(i,j)
    pub fn cs_ang(&self, i: usize, j: usize) -> f64 {
        self.cs_ang[i][j]
    }
}
