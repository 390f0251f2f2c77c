//! Space-time speed contours from vehicle trajectories: rasterization, gap
//! filling and adaptive smoothing along free-flow and congested
//! characteristics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub vehicle: String,
    /// Seconds.
    pub t: f64,
    /// Meters along the road.
    pub x: f64,
    /// Meters per second.
    pub v: f64,
}

/// Reads `vehicle_id,t,x[,v]`. Missing speeds are derived from neighbouring
/// positions of the same vehicle (forward difference, backward at the end).
pub fn read_trajectories<R: std::io::Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_v = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["vehicle_id", "t", "x"] => false,
        ["vehicle_id", "t", "x", "v"] => true,
        _ => {
            return Err(Error::Schema(format!(
                "trajectory header must be vehicle_id,t,x[,v], got {header:?}"
            )))
        }
    };
    let mut raw: Vec<(String, f64, f64, Option<f64>)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            let field = rec.get(c).unwrap_or("");
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Cell {
                    row: r + 1,
                    col: c + 1,
                    msg: format!("`{field}` is not a finite number"),
                })
        };
        let v = if has_v && !rec.get(3).unwrap_or("").is_empty() {
            let v = num(3)?;
            if v < 0.0 {
                return Err(Error::Cell {
                    row: r + 1,
                    col: 4,
                    msg: format!("negative speed {v}"),
                });
            }
            Some(v)
        } else {
            None
        };
        raw.push((rec.get(0).unwrap_or("").to_string(), num(1)?, num(2)?, v));
    }
    if raw.is_empty() {
        return Err(Error::Empty("no trajectory records".into()));
    }

    let mut by_vehicle: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in raw.iter().enumerate() {
        by_vehicle.entry(r.0.as_str()).or_default().push(i);
    }
    let mut speeds = vec![0.0; raw.len()];
    for (vehicle, idx) in &by_vehicle {
        for w in idx.windows(2) {
            if raw[w[1]].1 <= raw[w[0]].1 {
                return Err(Error::InvalidArgument(format!(
                    "timestamps of vehicle `{vehicle}` not strictly increasing at row {}",
                    w[1] + 1
                )));
            }
        }
        for (k, &i) in idx.iter().enumerate() {
            speeds[i] = match raw[i].3 {
                Some(v) => v,
                None => {
                    let (a, b) = if k + 1 < idx.len() {
                        (i, idx[k + 1])
                    } else if k > 0 {
                        (idx[k - 1], i)
                    } else {
                        return Err(Error::InvalidArgument(format!(
                            "vehicle `{vehicle}` has a single record and no speed"
                        )));
                    };
                    (raw[b].2 - raw[a].2).abs() / (raw[b].1 - raw[a].1)
                }
            };
        }
    }
    Ok(raw
        .into_iter()
        .zip(speeds)
        .map(|((vehicle, t, x, _), v)| TrajectoryRecord { vehicle, t, x, v })
        .collect())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_origin: f64,
    pub dx: f64,
    pub nx: usize,
    pub t_origin: f64,
    pub dt: f64,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(x_origin: f64, dx: f64, nx: usize, t_origin: f64, dt: f64, nt: usize) -> Result<Self> {
        if !(dx > 0.0 && dt > 0.0) || nx == 0 || nt == 0 || !x_origin.is_finite() || !t_origin.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid needs dx, dt > 0 and nx, nt >= 1 (dx={dx}, dt={dt}, nx={nx}, nt={nt})"
            )));
        }
        Ok(GridSpec {
            x_origin,
            dx,
            nx,
            t_origin,
            dt,
            nt,
        })
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut vals: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            match k.as_str() {
                "x_origin" | "dx" | "nx" | "t_origin" | "dt" | "nt" => {
                    vals.insert(k, v);
                }
                _ => return Err(Error::Config(format!("unknown grid key `{k}`"))),
            }
        }
        let get = |k: &str| -> Result<&str> {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("grid file lacks `{k}`")))
        };
        GridSpec::new(
            kv::parse_value("x_origin", get("x_origin")?)?,
            kv::parse_value("dx", get("dx")?)?,
            kv::parse_value("nx", get("nx")?)?,
            kv::parse_value("t_origin", get("t_origin")?)?,
            kv::parse_value("dt", get("dt")?)?,
            kv::parse_value("nt", get("nt")?)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        GridSpec::from_kv(&kv::read_kv(path)?)
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        self.x_origin + (ix as f64 + 0.5) * self.dx
    }

    pub fn t_center(&self, it: usize) -> f64 {
        self.t_origin + (it as f64 + 0.5) * self.dt
    }

    /// Cell holding `(x, t)`, if inside the grid.
    pub fn locate(&self, x: f64, t: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_origin) / self.dx).floor();
        let ft = ((t - self.t_origin) / self.dt).floor();
        if fx < 0.0 || ft < 0.0 || fx >= self.nx as f64 || ft >= self.nt as f64 {
            return None;
        }
        Some((fx as usize, ft as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Valid,
    /// Only zero-speed samples landed here.
    Zero,
    /// No samples.
    Nan,
}

/// `nx x nt` speeds, stored space-major (`values[ix * nt + it]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedField {
    pub grid: GridSpec,
    values: Vec<f64>,
    state: Vec<CellState>,
}

impl SpeedField {
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.nx * grid.nt);
        for ix in 0..grid.nx {
            for it in 0..grid.nt {
                values.push(f(ix, it));
            }
        }
        let state = vec![CellState::Valid; values.len()];
        SpeedField { grid, values, state }
    }

    pub fn new(grid: GridSpec, values: Vec<f64>, state: Vec<CellState>) -> Result<Self> {
        let n = grid.nx * grid.nt;
        if values.len() != n || state.len() != n {
            return Err(Error::InvalidArgument(format!(
                "field needs {n} cells, got {} values and {} flags",
                values.len(),
                state.len()
            )));
        }
        for (i, (&v, &s)) in values.iter().zip(&state).enumerate() {
            if s == CellState::Valid && !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("cell {i}: invalid speed {v}")));
            }
        }
        Ok(SpeedField { grid, values, state })
    }

    fn idx(&self, ix: usize, it: usize) -> usize {
        ix * self.grid.nt + it
    }

    pub fn get(&self, ix: usize, it: usize) -> f64 {
        self.values[self.idx(ix, it)]
    }

    pub fn state(&self, ix: usize, it: usize) -> CellState {
        self.state[self.idx(ix, it)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self, s: CellState) -> usize {
        self.state.iter().filter(|&&c| c == s).count()
    }

    pub fn is_gap_free(&self) -> bool {
        self.state.iter().all(|&s| s == CellState::Valid)
    }

    /// CSV grid: first row holds time-bin centres, first column space-bin
    /// centres; empty cells are written as `NaN`.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::from("x\\t");
        for it in 0..g.nt {
            let _ = write!(s, ",{}", g.t_center(it));
        }
        s.push('\n');
        for ix in 0..g.nx {
            let _ = write!(s, "{}", g.x_center(ix));
            for it in 0..g.nt {
                match self.state(ix, it) {
                    CellState::Nan => s.push_str(",NaN"),
                    _ => {
                        let _ = write!(s, ",{}", self.get(ix, it));
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a field written by [`SpeedField::to_csv`] on a known grid.
    /// `NaN` cells become gaps and exact zeros become zero-flagged cells.
    pub fn from_csv(text: &str, grid: GridSpec) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Empty("field csv is empty".into()))?;
        if header.split(',').count() != grid.nt + 1 {
            return Err(Error::Schema(format!("field header has wrong width for nt={}", grid.nt)));
        }
        let mut values = Vec::with_capacity(grid.nx * grid.nt);
        let mut state = Vec::with_capacity(grid.nx * grid.nt);
        for (r, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != grid.nt + 1 {
                return Err(Error::Cell {
                    row: r + 1,
                    col: cells.len(),
                    msg: format!("expected {} columns", grid.nt + 1),
                });
            }
            for (c, cell) in cells[1..].iter().enumerate() {
                if *cell == "NaN" {
                    values.push(f64::NAN);
                    state.push(CellState::Nan);
                    continue;
                }
                let v: f64 = cell.parse().map_err(|_| Error::Cell {
                    row: r + 1,
                    col: c + 2,
                    msg: format!("`{cell}` is not a number"),
                })?;
                values.push(v);
                state.push(if v == 0.0 { CellState::Zero } else { CellState::Valid });
            }
        }
        SpeedField::new(grid, values, state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Arithmetic mean of the in-cell sample speeds.
    Mean,
    /// Total distance over total time, each sample standing for half of the
    /// intervals to its neighbours.
    Edie,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "edie" => Ok(Aggregation::Edie),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Edie => "edie",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RasterStats {
    pub used: usize,
    pub dropped: usize,
}

pub fn rasterize(records: &[TrajectoryRecord], grid: GridSpec, agg: Aggregation) -> Result<(SpeedField, RasterStats)> {
    if records.is_empty() {
        return Err(Error::Empty("no trajectory records".into()));
    }
    let weights = match agg {
        Aggregation::Mean => vec![1.0; records.len()],
        Aggregation::Edie => time_weights(records),
    };
    let n = grid.nx * grid.nt;
    let mut dist = vec![0.0; n];
    let mut time = vec![0.0; n];
    let mut hits = vec![0usize; n];
    let mut nonzero = vec![false; n];
    let mut stats = RasterStats::default();
    for (r, w) in records.iter().zip(&weights) {
        match grid.locate(r.x, r.t) {
            Some((ix, it)) => {
                let i = ix * grid.nt + it;
                dist[i] += w * r.v;
                time[i] += w;
                hits[i] += 1;
                nonzero[i] |= r.v != 0.0;
                stats.used += 1;
            }
            None => stats.dropped += 1,
        }
    }
    if stats.used == 0 {
        return Err(Error::InvalidArgument(format!(
            "all {} records fall outside the grid",
            records.len()
        )));
    }
    let mut values = vec![f64::NAN; n];
    let mut state = vec![CellState::Nan; n];
    for i in 0..n {
        if hits[i] == 0 {
            continue;
        }
        if !nonzero[i] {
            values[i] = 0.0;
            state[i] = CellState::Zero;
        } else {
            values[i] = dist[i] / time[i];
            state[i] = CellState::Valid;
        }
    }
    Ok((SpeedField::new(grid, values, state)?, stats))
}

fn time_weights(records: &[TrajectoryRecord]) -> Vec<f64> {
    let mut by_vehicle: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_vehicle.entry(r.vehicle.as_str()).or_default().push(i);
    }
    let mut w = vec![1.0; records.len()];
    for idx in by_vehicle.values_mut() {
        idx.sort_by(|&a, &b| records[a].t.total_cmp(&records[b].t));
        if idx.len() < 2 {
            continue;
        }
        for (k, &i) in idx.iter().enumerate() {
            let left = if k > 0 { records[i].t - records[idx[k - 1]].t } else { 0.0 };
            let right = if k + 1 < idx.len() { records[idx[k + 1]].t - records[i].t } else { 0.0 };
            w[i] = 0.5 * (left + right);
        }
    }
    w
}

/// Zero cells: linear interpolation in time between the bracketing valid
/// cells of their space row. Gaps and unbracketed zeros: nearest valid cell
/// by Euclidean index distance, ties to the smaller space then time index.
pub fn fill_gaps(field: &SpeedField) -> Result<SpeedField> {
    let g = field.grid;
    if field.count(CellState::Valid) == 0 {
        return Err(Error::InvalidArgument("field has no valid cells".into()));
    }
    let mut out = field.clone();
    let mut pending = Vec::new();
    for ix in 0..g.nx {
        for it in 0..g.nt {
            match field.state(ix, it) {
                CellState::Valid => {}
                CellState::Nan => pending.push((ix, it)),
                CellState::Zero => {
                    let left = (0..it).rev().find(|&k| field.state(ix, k) == CellState::Valid);
                    let right = (it + 1..g.nt).find(|&k| field.state(ix, k) == CellState::Valid);
                    match (left, right) {
                        (Some(a), Some(b)) => {
                            let f = (it - a) as f64 / (b - a) as f64;
                            let i = out.idx(ix, it);
                            out.values[i] = field.get(ix, a) + f * (field.get(ix, b) - field.get(ix, a));
                            out.state[i] = CellState::Valid;
                        }
                        _ => pending.push((ix, it)),
                    }
                }
            }
        }
    }
    for (ix, it) in pending {
        let (sx, st) = nearest_valid(field, ix, it);
        let i = out.idx(ix, it);
        out.values[i] = field.get(sx, st);
        out.state[i] = CellState::Valid;
    }
    Ok(out)
}

fn nearest_valid(field: &SpeedField, ix: usize, it: usize) -> (usize, usize) {
    let g = field.grid;
    let (ix, it) = (ix as i64, it as i64);
    let mut best: Option<(i64, usize, usize)> = None;
    let max_r = g.nx.max(g.nt) as i64;
    for r in 1..=max_r {
        if let Some((d2, _, _)) = best {
            if r * r > d2 {
                break;
            }
        }
        for x in (ix - r).max(0)..=(ix + r).min(g.nx as i64 - 1) {
            for t in (it - r).max(0)..=(it + r).min(g.nt as i64 - 1) {
                if (x - ix).abs() != r && (t - it).abs() != r {
                    continue;
                }
                if field.state(x as usize, t as usize) != CellState::Valid {
                    continue;
                }
                let d2 = (x - ix).pow(2) + (t - it).pow(2);
                let cand = (d2, x as usize, t as usize);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
    }
    let (_, x, t) = best.expect("at least one valid cell");
    (x, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// `exp(-(|dx|/sigma + |dt - dx/c|/tau))`.
    Default,
    /// `exp(|dx|/sigma - |dt - dx/c|/tau)`, the printed form of the original
    /// algorithm listing. It grows with `|dx|` and does not low-pass.
    Verbatim,
}

impl FromStr for KernelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(KernelMode::Default),
            "verbatim" => Ok(KernelMode::Verbatim),
            _ => Err(Error::Config(format!("unknown kernel mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for KernelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelMode::Default => "default",
            KernelMode::Verbatim => "verbatim",
        })
    }
}

/// Smoothing weight for a source offset `(dx, dt)` along characteristic
/// speed `c`.
pub fn kernel_phi(dx: f64, dt: f64, sigma: f64, tau: f64, c: f64, mode: KernelMode) -> f64 {
    let along = (dt - dx / c).abs() / tau;
    match mode {
        KernelMode::Default => (-(dx.abs() / sigma + along)).exp(),
        KernelMode::Verbatim => (dx.abs() / sigma - along).exp(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    /// Meters.
    pub sigma: f64,
    /// Seconds.
    pub tau: f64,
    /// Signed characteristic speeds, m/s.
    pub c_free: f64,
    pub c_cong: f64,
    /// Crossover speed and transition width, m/s.
    pub v_c: f64,
    pub delta_v: f64,
    /// Window half-widths are `ceil(window * sigma / dx)` cells in space and
    /// `ceil(window * tau / dt)` in time; 0.5 by default, at most 3.
    pub window: f64,
    pub kernel: KernelMode,
    pub aggregation: Aggregation,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            sigma: 600.0,
            tau: 60.0,
            c_free: 80.0 / 3.6,
            c_cong: -15.0 / 3.6,
            v_c: 60.0 / 3.6,
            delta_v: 20.0 / 3.6,
            window: 0.5,
            kernel: KernelMode::Default,
            aggregation: Aggregation::Mean,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma > 0.0
            && self.tau > 0.0
            && self.delta_v > 0.0
            && self.c_free != 0.0
            && self.c_cong != 0.0
            && self.c_free.is_finite()
            && self.c_cong.is_finite()
            && self.v_c.is_finite()
            && self.window > 0.0
            && self.window <= 3.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid smoothing parameters {self:?}")));
        }
        Ok(())
    }

    pub fn half_widths(&self, grid: &GridSpec) -> (usize, usize) {
        (
            (self.window * self.sigma / grid.dx).ceil() as usize,
            (self.window * self.tau / grid.dt).ceil() as usize,
        )
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("sigma", self.sigma.to_string()),
            ("tau", self.tau.to_string()),
            ("c_free", self.c_free.to_string()),
            ("c_cong", self.c_cong.to_string()),
            ("v_c", self.v_c.to_string()),
            ("delta_v", self.delta_v.to_string()),
            ("window", self.window.to_string()),
            ("kernel", self.kernel.to_string()),
            ("aggregation", self.aggregation.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Starts from the defaults and overrides the keys present.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut p = SmoothingParams::default();
        for (k, v) in pairs {
            match k.as_str() {
                "sigma" => p.sigma = kv::parse_value(k, v)?,
                "tau" => p.tau = kv::parse_value(k, v)?,
                "c_free" => p.c_free = kv::parse_value(k, v)?,
                "c_cong" => p.c_cong = kv::parse_value(k, v)?,
                "v_c" => p.v_c = kv::parse_value(k, v)?,
                "delta_v" => p.delta_v = kv::parse_value(k, v)?,
                "window" => p.window = kv::parse_value(k, v)?,
                "kernel" => p.kernel = v.parse()?,
                "aggregation" => p.aggregation = v.parse()?,
                _ => return Err(Error::Config(format!("unknown smoothing key `{k}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Smoothed field plus the per-cell congestion weight `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub field: SpeedField,
    pub weight: Vec<f64>,
}

pub fn congestion_weight(v_min: f64, v_c: f64, delta_v: f64) -> f64 {
    0.5 * (1.0 + ((v_c - v_min) / delta_v).tanh())
}

/// Blends the free-flow and congested kernel means of each cell's window
/// with weight `w = (1 + tanh((V_c - min(V_free, V_cong)) / dV)) / 2`.
pub fn adaptive_smooth(field: &SpeedField, p: &SmoothingParams) -> Result<Smoothed> {
    p.validate()?;
    if !field.is_gap_free() {
        return Err(Error::InvalidArgument("adaptive_smooth needs a gap-free field".into()));
    }
    let g = field.grid;
    let (hx, ht) = p.half_widths(&g);
    let mut values = Vec::with_capacity(field.values.len());
    let mut weight = Vec::with_capacity(field.values.len());
    for ix in 0..g.nx {
        for it in 0..g.nt {
            let (mut nf, mut df, mut nc, mut dc) = (0.0, 0.0, 0.0, 0.0);
            for sx in ix.saturating_sub(hx)..=(ix + hx).min(g.nx - 1) {
                let dx = (ix as f64 - sx as f64) * g.dx;
                for st in it.saturating_sub(ht)..=(it + ht).min(g.nt - 1) {
                    let dt = (it as f64 - st as f64) * g.dt;
                    let v = field.get(sx, st);
                    let pf = kernel_phi(dx, dt, p.sigma, p.tau, p.c_free, p.kernel);
                    let pc = kernel_phi(dx, dt, p.sigma, p.tau, p.c_cong, p.kernel);
                    nf += pf * v;
                    df += pf;
                    nc += pc * v;
                    dc += pc;
                }
            }
            if !(df > 0.0 && dc > 0.0 && df.is_finite() && dc.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate smoothing window at cell ({ix}, {it})"
                )));
            }
            let (v_free, v_cong) = (nf / df, nc / dc);
            let w = congestion_weight(v_free.min(v_cong), p.v_c, p.delta_v);
            values.push(w * v_cong + (1.0 - w) * v_free);
            weight.push(w);
        }
    }
    let state = vec![CellState::Valid; values.len()];
    Ok(Smoothed {
        field: SpeedField::new(g, values, state)?,
        weight,
    })
}

/// `key = value` summary of a smoothing run.
pub fn smoothing_report(p: &SmoothingParams, grid: &GridSpec, raw: &SpeedField, stats: &RasterStats) -> String {
    let (hx, ht) = p.half_widths(grid);
    let mut pairs = p.to_kv();
    pairs.extend(
        [
            ("half_width_x", hx.to_string()),
            ("half_width_t", ht.to_string()),
            ("records_used", stats.used.to_string()),
            ("records_dropped", stats.dropped.to_string()),
            ("cells_valid", raw.count(CellState::Valid).to_string()),
            ("cells_zero", raw.count(CellState::Zero).to_string()),
            ("cells_nan", raw.count(CellState::Nan).to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v)),
    );
    kv::format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}
