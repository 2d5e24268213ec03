//! Demonstration dataset storage and training-window extraction.
//!
//! Layout, all little-endian:
//!   magic "ADPD" | version u32
//!   joints u32 | sensors u32 | rows u32 | cols u32
//!   history u32 | horizon u32 | workspace min xyz, max xyz f64 x 6
//!   episodes u32
//!   per episode: steps u32, then per step:
//!     step u32
//!     npts u32 | has_intensity u8 | point xyz f64 x npts | intensity f64 x npts?
//!     taxels: sensors x rows x cols x (force 3 | rot6d 6 | position 3) f64
//!     action (3 + 6 + joints) f64
//!     net_force f64 x 3
//!     phase u8
//!
//! The decoder is total on untrusted bytes: counts are bounded, every size
//! is checked against the remaining input before allocation, and floats
//! must be finite.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::policy::TrainSample;
use crate::sensing::{
    Action, ActionChunk, Observation, PointCloud, SensorGrid, TactileFrame, TaxelReading,
    WorkspaceBox,
};

use super::world::Phase;
use super::SimError;

pub const DATASET_MAGIC: &[u8; 4] = b"ADPD";
pub const DATASET_VERSION: u32 = 1;

const MAX_EPISODES: usize = 10_000;
const MAX_STEPS: usize = 100_000;
const MAX_POINTS: usize = 1_000_000;
const MAX_SENSORS: usize = 64;
const MAX_TAXELS: usize = 4_096;
const MAX_JOINTS: usize = 64;

fn bad(msg: impl Into<String>) -> SimError {
    SimError::Dataset(msg.into())
}

/// One recorded control step. `net_force` is the world-frame force carried
/// by the pads right after `action` executed; `obs` is what the controller
/// saw before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: Action,
    pub net_force: [f64; 3],
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub steps: Vec<DemoStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub joints: usize,
    pub sensors: usize,
    pub rows: usize,
    pub cols: usize,
    /// Observation-history and action-chunk lengths this set was cut for.
    pub history: usize,
    pub horizon: usize,
    pub workspace: WorkspaceBox,
    pub episodes: Vec<DemoEpisode>,
}

impl DemoDataset {
    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.episodes.len() > MAX_EPISODES {
            return Err(bad(format!("too many episodes: {}", self.episodes.len())));
        }
        if self.sensors > MAX_SENSORS || self.rows * self.cols > MAX_TAXELS {
            return Err(bad("sensor layout out of range"));
        }
        if self.joints > MAX_JOINTS {
            return Err(bad("too many joints"));
        }
        if self.history > MAX_STEPS || self.horizon > MAX_STEPS {
            return Err(bad("window hints out of range"));
        }
        for (ei, ep) in self.episodes.iter().enumerate() {
            if ep.steps.len() > MAX_STEPS {
                return Err(bad(format!("episode {ei} too long")));
            }
            for (si, st) in ep.steps.iter().enumerate() {
                let at = format!("episode {ei} step {si}");
                if st.action.joints.len() != self.joints {
                    return Err(bad(format!("{at}: joint count mismatch")));
                }
                if st.obs.tactile.sensors.len() != self.sensors {
                    return Err(bad(format!("{at}: sensor count mismatch")));
                }
                for g in &st.obs.tactile.sensors {
                    if g.rows != self.rows || g.cols != self.cols {
                        return Err(bad(format!("{at}: grid shape mismatch")));
                    }
                }
                if st.obs.cloud.len() > MAX_POINTS {
                    return Err(bad(format!("{at}: cloud too large")));
                }
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_dataset(ds: &DemoDataset) -> Result<Vec<u8>, SimError> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, ds.joints);
    put_u32(&mut out, ds.sensors);
    put_u32(&mut out, ds.rows);
    put_u32(&mut out, ds.cols);
    put_u32(&mut out, ds.history);
    put_u32(&mut out, ds.horizon);
    put_f64s(&mut out, &ds.workspace.min);
    put_f64s(&mut out, &ds.workspace.max);
    put_u32(&mut out, ds.episodes.len());
    for ep in &ds.episodes {
        put_u32(&mut out, ep.steps.len());
        for st in &ep.steps {
            put_u32(&mut out, st.obs.step);
            put_u32(&mut out, st.obs.cloud.len());
            out.push(st.obs.cloud.intensity.is_some() as u8);
            for p in &st.obs.cloud.points {
                put_f64s(&mut out, p);
            }
            if let Some(int) = &st.obs.cloud.intensity {
                put_f64s(&mut out, int);
            }
            for g in &st.obs.tactile.sensors {
                for t in &g.taxels {
                    put_f64s(&mut out, &t.force);
                    put_f64s(&mut out, &t.rot6d);
                    put_f64s(&mut out, &t.position);
                }
            }
            put_f64s(&mut out, &st.action.flatten());
            put_f64s(&mut out, &st.net_force);
            out.push(st.phase.code());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SimError> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SimError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, SimError> {
        Ok(LittleEndian::read_u32(self.take(4, what)?) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, SimError> {
        let need = n.checked_mul(8).ok_or_else(|| bad("size overflow"))?;
        let raw = self.take(need, what)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let v = LittleEndian::read_f64(&raw[i * 8..i * 8 + 8]);
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in {what}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DemoDataset, SimError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != DATASET_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = LittleEndian::read_u32(cur.take(4, "version")?);
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let joints = cur.u32("joint count")?;
    let sensors = cur.u32("sensor count")?;
    let rows = cur.u32("row count")?;
    let cols = cur.u32("col count")?;
    let history = cur.u32("history hint")?;
    let horizon = cur.u32("horizon hint")?;
    let wmin = cur.f64s(3, "workspace min")?;
    let wmax = cur.f64s(3, "workspace max")?;
    let n_eps = cur.u32("episode count")?;
    if joints > MAX_JOINTS || sensors > MAX_SENSORS {
        return Err(bad("header counts out of range"));
    }
    if history > MAX_STEPS || horizon > MAX_STEPS {
        return Err(bad("window hints out of range"));
    }
    let taxels = rows
        .checked_mul(cols)
        .filter(|&t| t <= MAX_TAXELS)
        .ok_or_else(|| bad("taxel grid out of range"))?;
    if n_eps > MAX_EPISODES {
        return Err(bad("episode count out of range"));
    }
    let mut episodes = Vec::with_capacity(n_eps.min(1024));
    for ei in 0..n_eps {
        let n_steps = cur.u32("step count")?;
        if n_steps > MAX_STEPS {
            return Err(bad(format!("episode {ei}: step count out of range")));
        }
        let mut steps = Vec::with_capacity(n_steps.min(4096));
        for _ in 0..n_steps {
            let step = cur.u32("step index")?;
            let npts = cur.u32("point count")?;
            if npts > MAX_POINTS {
                return Err(bad("point count out of range"));
            }
            let has_int = match cur.u8("intensity flag")? {
                0 => false,
                1 => true,
                v => return Err(bad(format!("bad intensity flag {v}"))),
            };
            let raw = cur.f64s(npts * 3, "cloud points")?;
            let points: Vec<[f64; 3]> = raw.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let intensity = if has_int {
                Some(cur.f64s(npts, "intensities")?)
            } else {
                None
            };
            let mut cloud = PointCloud::new(points);
            cloud.intensity = intensity;

            let mut grids = Vec::with_capacity(sensors);
            for _ in 0..sensors {
                let raw = cur.f64s(taxels * 12, "taxels")?;
                let tx: Vec<TaxelReading> = raw
                    .chunks(12)
                    .map(|c| TaxelReading {
                        force: [c[0], c[1], c[2]],
                        rot6d: [c[3], c[4], c[5], c[6], c[7], c[8]],
                        position: [c[9], c[10], c[11]],
                    })
                    .collect();
                grids.push(SensorGrid::new(rows, cols, tx).map_err(|e| bad(e.to_string()))?);
            }
            let tactile = TactileFrame::new(grids).map_err(|e| bad(e.to_string()))?;

            let flat = cur.f64s(Action::dim(joints), "action")?;
            let action = Action::from_flat(&flat, joints).map_err(|e| bad(e.to_string()))?;
            let nf = cur.f64s(3, "net force")?;
            let phase = Phase::from_code(cur.u8("phase")?)
                .ok_or_else(|| bad("bad phase code"))?;

            steps.push(DemoStep {
                obs: Observation {
                    cloud,
                    tactile,
                    step,
                },
                action,
                net_force: [nf[0], nf[1], nf[2]],
                phase,
            });
        }
        episodes.push(DemoEpisode { steps });
    }
    if cur.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", cur.remaining())));
    }
    Ok(DemoDataset {
        joints,
        sensors,
        rows,
        cols,
        history,
        horizon,
        workspace: WorkspaceBox {
            min: [wmin[0], wmin[1], wmin[2]],
            max: [wmax[0], wmax[1], wmax[2]],
        },
        episodes,
    })
}

pub fn write_dataset(path: &Path, ds: &DemoDataset) -> Result<(), SimError> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DemoDataset, SimError> {
    let bytes = std::fs::read(path)?;
    decode_dataset(&bytes)
}

/// Slice every episode into training windows: `history` observations up to
/// and including time t, the next `horizon` actions, and the net force
/// measured right after each of those actions.
pub fn windows(ds: &DemoDataset, history: usize, horizon: usize) -> Vec<TrainSample> {
    let mut out = Vec::new();
    if history == 0 || horizon == 0 {
        return out;
    }
    for ep in &ds.episodes {
        let len = ep.steps.len();
        if len < history + horizon - 1 {
            continue;
        }
        for t in (history - 1)..=(len - horizon) {
            let hist: Vec<Observation> = ep.steps[t + 1 - history..=t]
                .iter()
                .map(|s| s.obs.clone())
                .collect();
            let actions: Vec<Action> = ep.steps[t..t + horizon]
                .iter()
                .map(|s| s.action.clone())
                .collect();
            let future: Vec<[f64; 3]> = ep.steps[t..t + horizon]
                .iter()
                .map(|s| s.net_force)
                .collect();
            out.push(TrainSample {
                history: hist,
                chunk: ActionChunk { actions },
                future_forces: future,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taxel(seed: f64) -> TaxelReading {
        TaxelReading {
            force: [seed, -seed, 2.0 * seed],
            rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            position: [0.1, 0.2, seed],
        }
    }

    fn obs(step: usize) -> Observation {
        let pts = (0..4 + step % 3)
            .map(|i| [i as f64 * 0.01, step as f64 * 0.1, 0.0])
            .collect();
        let grid = |s: f64| SensorGrid::new(1, 2, vec![taxel(s), taxel(s + 0.5)]).unwrap();
        Observation {
            cloud: PointCloud::new(pts),
            tactile: TactileFrame::new(vec![grid(step as f64), grid(step as f64 + 7.0)]).unwrap(),
            step,
        }
    }

    fn demo_step(t: usize) -> DemoStep {
        let mut action = Action::zero(1);
        action.translation[0] = t as f64 * 1e-3;
        action.joints[0] = -(t as f64) * 1e-4;
        DemoStep {
            obs: obs(t),
            action,
            net_force: [t as f64, 0.5, -0.25],
            phase: Phase::from_code((t % 4) as u8).unwrap(),
        }
    }

    fn dataset() -> DemoDataset {
        DemoDataset {
            joints: 1,
            sensors: 2,
            rows: 1,
            cols: 2,
            history: 2,
            horizon: 3,
            workspace: WorkspaceBox {
                min: [0.0, 0.0, -0.01],
                max: [0.35, 0.35, 0.12],
            },
            episodes: vec![
                DemoEpisode {
                    steps: (0..6).map(demo_step).collect(),
                },
                DemoEpisode {
                    steps: (0..3).map(demo_step).collect(),
                },
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = dataset();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, encode_dataset(&back).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.adpd");
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn windows_align_history_actions_and_forces() {
        let ds = dataset();
        let samples = windows(&ds, 2, 3);
        // Episode one: t in 1..=3 gives 3 windows; episode two (len 3) is
        // too short to fit two observations plus a three-action chunk.
        assert_eq!(samples.len(), 3);
        let s = &samples[1]; // episode one, t = 2
        assert_eq!(
            s.history.iter().map(|o| o.step).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert_eq!(s.chunk.len(), 3);
        assert_eq!(s.chunk.actions[0].translation[0], 2e-3);
        assert_eq!(s.future_forces[0][0], 2.0);
        assert_eq!(s.future_forces[2][0], 4.0);

        // Too-short episodes yield nothing.
        assert!(windows(&ds, 4, 6).is_empty());
    }

    #[test]
    fn decoder_rejects_corrupt_input() {
        let ds = dataset();
        let bytes = encode_dataset(&ds).unwrap();

        assert!(decode_dataset(b"ADPX\x01\x00\x00\x00").is_err());
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_dataset(&trailing).is_err());

        // Point count claiming more data than the buffer holds.
        let mut huge = bytes.clone();
        // magic + version + four u32 dims + two u32 hints + workspace +
        // episode count + step count + step index.
        let pt_count_at = 4 + 4 + 4 * 4 + 2 * 4 + 6 * 8 + 4 + 4 + 4;
        huge[pt_count_at..pt_count_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_dataset(&huge).is_err());

        // Non-finite float in the payload.
        let mut nan = bytes.clone();
        let first_pt = pt_count_at + 4 + 1;
        nan[first_pt..first_pt + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_dataset(&nan).is_err());
    }
}
