//! Deterministic masking schedules.
//!
//! A [`MaskSchedule`] partitions the positions of an `h × w` grid into an
//! ordered list of groups. Group 1 is coded first under a uniform prior, every
//! later group is coded conditioned on all earlier ones. Encoder and decoder
//! rebuild the schedule from `(kind, h, w)` alone, so construction must be
//! bit-reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// The plastic constant, root of x^3 = x + 1.
const PLASTIC: f64 = 1.324_717_957_244_746;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Checkerboard,
    Quincunx,
    /// Quantized low-discrepancy schedule with `steps` groups whose cumulative
    /// sizes follow `ceil(N (i/steps)^alpha)`.
    Qlds { alpha: f32, steps: u16 },
    /// Nested subsampling lattices, one `(rows, cols)` pair per scale.
    ImplicitVar { scales: Vec<(u16, u16)> },
}

impl ScheduleKind {
    pub fn code(&self) -> u8 {
        match self {
            ScheduleKind::Checkerboard => 0,
            ScheduleKind::Quincunx => 1,
            ScheduleKind::Qlds { .. } => 2,
            ScheduleKind::ImplicitVar { .. } => 3,
        }
    }

    /// Writes `kind u8` followed by the kind-specific parameters.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_u8(self.code())?;
        match self {
            ScheduleKind::Checkerboard | ScheduleKind::Quincunx => {}
            ScheduleKind::Qlds { alpha, steps } => {
                w.write_f32::<LittleEndian>(*alpha)?;
                w.write_u16::<LittleEndian>(*steps)?;
            }
            ScheduleKind::ImplicitVar { scales } => {
                let n = u8::try_from(scales.len())
                    .map_err(|_| Error::Schedule(format!("{} scales do not fit in a u8", scales.len())))?;
                w.write_u8(n)?;
                for &(a, b) in scales {
                    w.write_u16::<LittleEndian>(a)?;
                    w.write_u16::<LittleEndian>(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let code = r.read_u8()?;
        Self::read_params(code, r)
    }

    /// Reads the parameters following an already consumed kind byte.
    pub fn read_params<R: Read>(code: u8, mut r: R) -> Result<Self> {
        Ok(match code {
            0 => ScheduleKind::Checkerboard,
            1 => ScheduleKind::Quincunx,
            2 => {
                let alpha = r.read_f32::<LittleEndian>()?;
                let steps = r.read_u16::<LittleEndian>()?;
                ScheduleKind::Qlds { alpha, steps }
            }
            3 => {
                let n = r.read_u8()? as usize;
                let mut scales = Vec::with_capacity(n);
                for _ in 0..n {
                    let a = r.read_u16::<LittleEndian>()?;
                    let b = r.read_u16::<LittleEndian>()?;
                    scales.push((a, b));
                }
                ScheduleKind::ImplicitVar { scales }
            }
            other => return Err(Error::Schedule(format!("unknown schedule kind byte {other}"))),
        })
    }

    pub fn serialized_len(&self) -> usize {
        1 + match self {
            ScheduleKind::Checkerboard | ScheduleKind::Quincunx => 0,
            ScheduleKind::Qlds { .. } => 6,
            ScheduleKind::ImplicitVar { scales } => 1 + 4 * scales.len(),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Checkerboard => write!(f, "checkerboard"),
            ScheduleKind::Quincunx => write!(f, "quincunx"),
            ScheduleKind::Qlds { alpha, steps } => write!(f, "qlds:{alpha}:{steps}"),
            ScheduleKind::ImplicitVar { scales } => {
                write!(f, "ivar:")?;
                for (k, (a, b)) in scales.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    if a == b {
                        write!(f, "{a}")?;
                    } else {
                        write!(f, "{a}x{b}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Parses `checkerboard`, `quincunx`, `qlds:<alpha>:<S>` or
/// `ivar:<s1>,<s2>,...` where each scale is `n` or `rowsxcols`.
impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        match name {
            "checkerboard" | "ckbd" => Ok(ScheduleKind::Checkerboard),
            "quincunx" => Ok(ScheduleKind::Quincunx),
            "qlds" => {
                let (a, st) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("qlds needs `qlds:<alpha>:<S>`, got {s:?}")))?;
                let alpha: f32 = a.parse().map_err(|_| Error::Parse(format!("bad qlds alpha {a:?}")))?;
                let steps: u16 = st.parse().map_err(|_| Error::Parse(format!("bad qlds step count {st:?}")))?;
                Ok(ScheduleKind::Qlds { alpha, steps })
            }
            "ivar" | "implicit_var" => {
                let mut scales = Vec::new();
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let parse = |t: &str| t.parse::<u16>().map_err(|_| Error::Parse(format!("bad scale {part:?}")));
                    match part.split_once('x') {
                        Some((a, b)) => scales.push((parse(a)?, parse(b)?)),
                        None => {
                            let a = parse(part)?;
                            scales.push((a, a));
                        }
                    }
                }
                if scales.is_empty() {
                    return Err(Error::Parse("ivar needs at least one scale".into()));
                }
                Ok(ScheduleKind::ImplicitVar { scales })
            }
            _ => Err(Error::Parse(format!("unknown schedule {s:?}"))),
        }
    }
}

/// Ordered partition of grid positions (flat, row-major) into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSchedule {
    h: usize,
    w: usize,
    kind: ScheduleKind,
    groups: Vec<Vec<usize>>,
}

impl MaskSchedule {
    pub fn build(kind: &ScheduleKind, h: usize, w: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Checkerboard => checkerboard_schedule(h, w),
            ScheduleKind::Quincunx => quincunx_schedule(h, w),
            ScheduleKind::Qlds { alpha, steps } => qlds_schedule(h, w, *alpha, *steps as usize),
            ScheduleKind::ImplicitVar { scales } => {
                let scales: Vec<(usize, usize)> = scales.iter().map(|&(a, b)| (a as usize, b as usize)).collect();
                implicit_var_schedule(h, w, &scales)
            }
        }
    }

    /// Wraps arbitrary groups without checking them. Use
    /// [`validate_schedule`] to inspect the result.
    pub fn from_raw(h: usize, w: usize, kind: ScheduleKind, groups: Vec<Vec<usize>>) -> Self {
        Self { h, w, kind, groups }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_positions(&self) -> usize {
        self.h * self.w
    }

    /// Number of revealed positions after each group.
    pub fn cumulative_counts(&self) -> Vec<usize> {
        self.groups
            .iter()
            .scan(0, |acc, g| {
                *acc += g.len();
                Some(*acc)
            })
            .collect()
    }

    /// Group index (0-based) of every flat position.
    pub fn group_index(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.h * self.w];
        for (k, g) in self.groups.iter().enumerate() {
            for &p in g {
                if p < out.len() {
                    out[p] = k;
                }
            }
        }
        out
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Schedule(format!("grid dims must be >= 1, got {h}x{w}")));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Schedule(format!("grid dims {h}x{w} exceed u16")));
    }
    Ok(())
}

pub fn checkerboard_schedule(h: usize, w: usize) -> Result<MaskSchedule> {
    check_dims(h, w)?;
    let (even, odd): (Vec<usize>, Vec<usize>) = (0..h * w).partition(|&p| (p / w + p % w).is_multiple_of(2));
    let groups = [even, odd].into_iter().filter(|g| !g.is_empty()).collect();
    Ok(MaskSchedule { h, w, kind: ScheduleKind::Checkerboard, groups })
}

pub fn quincunx_schedule(h: usize, w: usize) -> Result<MaskSchedule> {
    check_dims(h, w)?;
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::Schedule(format!("quincunx needs dims divisible by 4, got {h}x{w}")));
    }
    let class = |p: usize| {
        let (i, j) = (p / w, p % w);
        match (i % 4, j % 4) {
            (0, 0) => 0,
            (2, 2) => 1,
            _ if i % 2 == 0 && j % 2 == 0 => 2,
            _ if i % 2 == 1 && j % 2 == 1 => 3,
            _ => 4,
        }
    };
    let mut groups = vec![Vec::new(); 5];
    for p in 0..h * w {
        groups[class(p)].push(p);
    }
    Ok(MaskSchedule { h, w, kind: ScheduleKind::Quincunx, groups })
}

/// Cumulative group sizes `ceil(N (i/S)^alpha)`, forced strictly increasing
/// and ending at `N`.
pub fn qlds_cumulative(n: usize, alpha: f64, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Schedule("qlds needs S >= 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Schedule(format!("qlds needs alpha > 0, got {alpha}")));
    }
    if steps > n {
        return Err(Error::Schedule(format!("qlds S={steps} exceeds N={n} positions")));
    }
    let mut out = Vec::with_capacity(steps);
    let mut prev = 0usize;
    for i in 1..=steps {
        let raw = if i == steps { n } else { (n as f64 * (i as f64 / steps as f64).powf(alpha)).ceil() as usize };
        let c = raw.max(prev + 1).min(n - (steps - i));
        out.push(c);
        prev = c;
    }
    Ok(out)
}

/// All positions of an `h × w` grid in low-discrepancy order: the R2
/// additive recurrence `fract(t / rho, t / rho^2)` with each point claiming
/// the nearest unclaimed cell centre, ties to the lower raster index.
pub fn low_discrepancy_order(h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let (a1, a2) = (1.0 / PLASTIC, 1.0 / (PLASTIC * PLASTIC));
    let centres: Vec<(f64, f64)> =
        (0..n).map(|p| (((p / w) as f64 + 0.5) / h as f64, ((p % w) as f64 + 0.5) / w as f64)).collect();
    let mut claimed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for t in 0..n {
        let (x, y) = (t as f64 * a1, t as f64 * a2);
        let u = (x - x.floor(), y - y.floor());
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (p, &(ci, cj)) in centres.iter().enumerate() {
            if claimed[p] {
                continue;
            }
            let d = (ci - u.0) * (ci - u.0) + (cj - u.1) * (cj - u.1);
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        claimed[best] = true;
        order.push(best);
    }
    order
}

pub fn qlds_schedule(h: usize, w: usize, alpha: f32, steps: usize) -> Result<MaskSchedule> {
    check_dims(h, w)?;
    if steps > u16::MAX as usize {
        return Err(Error::Schedule(format!("qlds S={steps} exceeds u16")));
    }
    let cum = qlds_cumulative(h * w, alpha as f64, steps)?;
    let order = low_discrepancy_order(h, w);
    let mut groups = Vec::with_capacity(steps);
    let mut start = 0;
    for c in cum {
        groups.push(order[start..c].to_vec());
        start = c;
    }
    Ok(MaskSchedule { h, w, kind: ScheduleKind::Qlds { alpha, steps: steps as u16 }, groups })
}

/// `{ floor(t n / s) : t = 0..s }`, the rows (or columns) kept at scale `s`.
pub fn scale_indices(s: usize, n: usize) -> Vec<usize> {
    (0..s).map(|t| t * n / s).collect()
}

/// Validates a scale list for an `h × w` grid and returns the per-scale
/// `(row indices, col indices)`.
pub(crate) fn nested_scale_indices(h: usize, w: usize, scales: &[(usize, usize)]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    check_dims(h, w)?;
    let Some(&last) = scales.last() else {
        return Err(Error::Schedule("implicit VAR needs at least one scale".into()));
    };
    if last != (h, w) {
        return Err(Error::Schedule(format!("last scale must equal the grid {h}x{w}, got {}x{}", last.0, last.1)));
    }
    let mut out: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(scales.len());
    for (k, &(sh, sw)) in scales.iter().enumerate() {
        if sh == 0 || sw == 0 || sh > h || sw > w {
            return Err(Error::Schedule(format!("scale {k} ({sh}x{sw}) outside 1..={h}x{w}")));
        }
        if k > 0 {
            let (ph, pw) = scales[k - 1];
            if sh < ph || sw < pw || (sh, sw) == (ph, pw) {
                return Err(Error::Schedule(format!(
                    "scales must be strictly increasing: scale {k} ({sh}x{sw}) after {ph}x{pw}"
                )));
            }
        }
        let rows = scale_indices(sh, h);
        let cols = scale_indices(sw, w);
        if let Some((prow, pcol)) = out.last() {
            if !prow.iter().all(|r| rows.binary_search(r).is_ok()) || !pcol.iter().all(|c| cols.binary_search(c).is_ok()) {
                return Err(Error::Schedule(format!(
                    "scale {k} ({sh}x{sw}) does not contain the lattice of scale {} ({}x{})",
                    k - 1,
                    scales[k - 1].0,
                    scales[k - 1].1
                )));
            }
        }
        out.push((rows, cols));
    }
    Ok(out)
}

pub fn implicit_var_schedule(h: usize, w: usize, scales: &[(usize, usize)]) -> Result<MaskSchedule> {
    if scales.len() > u8::MAX as usize {
        return Err(Error::Schedule(format!("{} scales exceed the u8 count field", scales.len())));
    }
    let lattices = nested_scale_indices(h, w, scales)?;
    let mut revealed = vec![false; h * w];
    let mut groups = Vec::with_capacity(scales.len());
    for (rows, cols) in &lattices {
        let mut g = Vec::new();
        for &i in rows {
            for &j in cols {
                let p = i * w + j;
                if !revealed[p] {
                    revealed[p] = true;
                    g.push(p);
                }
            }
        }
        g.sort_unstable();
        groups.push(g);
    }
    let kind = ScheduleKind::ImplicitVar { scales: scales.iter().map(|&(a, b)| (a as u16, b as u16)).collect() };
    Ok(MaskSchedule { h, w, kind, groups })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    OutOfRange { group: usize, pos: usize },
    Overlap { i: usize, j: usize },
    Missing { i: usize, j: usize },
    EmptyGroup { group: usize },
    NotReproducible(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfRange { group, pos } => write!(f, "position {pos} in group {group} is outside the grid"),
            Violation::Overlap { i, j } => write!(f, "overlap at ({i},{j})"),
            Violation::Missing { i, j } => write!(f, "position ({i},{j}) not covered"),
            Violation::EmptyGroup { group } => write!(f, "group {group} is empty"),
            Violation::NotReproducible(why) => write!(f, "rebuild from parameters differs: {why}"),
        }
    }
}

/// Checks the partition property, non-empty groups, and that rebuilding from
/// the serialized parameters gives the same groups.
pub fn validate_schedule(s: &MaskSchedule) -> std::result::Result<(), Vec<Violation>> {
    let n = s.h * s.w;
    let mut seen = vec![false; n];
    let mut v = Vec::new();
    for (k, g) in s.groups.iter().enumerate() {
        if g.is_empty() {
            v.push(Violation::EmptyGroup { group: k });
        }
        for &p in g {
            if p >= n {
                v.push(Violation::OutOfRange { group: k, pos: p });
            } else if seen[p] {
                v.push(Violation::Overlap { i: p / s.w.max(1), j: p % s.w.max(1) });
            } else {
                seen[p] = true;
            }
        }
    }
    for (p, ok) in seen.iter().enumerate() {
        if !ok {
            v.push(Violation::Missing { i: p / s.w, j: p % s.w });
        }
    }
    let mut bytes = Vec::new();
    let rebuilt = s
        .kind
        .write_to(&mut bytes)
        .and_then(|_| ScheduleKind::read_from(&bytes[..]))
        .and_then(|k| MaskSchedule::build(&k, s.h, s.w));
    match rebuilt {
        Ok(r) if r.groups == s.groups => {}
        Ok(_) => v.push(Violation::NotReproducible("group contents differ".into())),
        Err(e) => v.push(Violation::NotReproducible(e.to_string())),
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
