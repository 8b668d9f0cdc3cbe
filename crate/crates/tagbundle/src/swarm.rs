//! Tag-ID indirect communication and the train-link formation state machine.
//!
//! Robots carry their bundle on an LCD pair and change the displayed tag ID
//! to signal state; the robot behind reads the ID (majority vote over a
//! short window, so one corrupted frame cannot trigger a transition) and the
//! pose in the same detection pass. No radio channel exists: every
//! transition is driven by what a robot saw on the robot ahead during the
//! previous tick (two-phase update, so tick results are order-independent).
//!
//! The displayed ID encodes `message_base * 8 + placement_slot`, keeping the
//! per-tag geometry fixed while the message changes.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_bundle, BundleEstimate, EstimatorConfig, FilterWindow};
use crate::geometry::{to_planar, wrap_deg, BundleGeometry, CameraIntrinsics, PlanarPose};
use crate::latch::{
    check_latch, guidance, step_boat, world_from_bundle, world_from_camera, BoatState, Command,
    Gains, LatchThresholds, VelocityLimits,
};
use crate::sim::{simulate_frame, NoiseProfile};

/// Stride between message base IDs and placement slots in the displayed ID.
pub const TAG_SLOT_STRIDE: u32 = 8;

pub const MSG_STAND_BY: &str = "STAND_BY";
pub const MSG_FORM_TRAIN_LINK: &str = "FORM_TRAIN_LINK";
pub const MSG_LATCHED_FORM_TRAIN_LINK: &str = "LATCHED_FORM_TRAIN_LINK";

#[derive(Debug, Error, PartialEq)]
pub enum SwarmError {
    #[error("codebook is not a bijection: duplicate message {0}")]
    DuplicateMessage(String),
    #[error("no codebook entry for message {0}")]
    MissingMessage(String),
    #[error("scenario needs at least 2 robots")]
    TooFewRobots,
    #[error("initial spacing must be positive")]
    BadSpacing,
}

/// Bijective tag-ID ↔ message map shared by every robot in a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u32, String>", into = "BTreeMap<u32, String>")]
pub struct TagCodebook {
    by_id: BTreeMap<u32, String>,
}

impl TryFrom<BTreeMap<u32, String>> for TagCodebook {
    type Error = SwarmError;
    fn try_from(by_id: BTreeMap<u32, String>) -> Result<Self, SwarmError> {
        let mut seen = std::collections::BTreeSet::new();
        for msg in by_id.values() {
            if !seen.insert(msg.clone()) {
                return Err(SwarmError::DuplicateMessage(msg.clone()));
            }
        }
        Ok(TagCodebook { by_id })
    }
}

impl From<TagCodebook> for BTreeMap<u32, String> {
    fn from(c: TagCodebook) -> Self {
        c.by_id
    }
}

impl TagCodebook {
    /// The three train-link messages on base IDs 0..=2.
    pub fn default_train_link() -> Self {
        let mut by_id = BTreeMap::new();
        by_id.insert(0, MSG_STAND_BY.to_string());
        by_id.insert(1, MSG_FORM_TRAIN_LINK.to_string());
        by_id.insert(2, MSG_LATCHED_FORM_TRAIN_LINK.to_string());
        TagCodebook { by_id }
    }

    pub fn id_of(&self, message: &str) -> Result<u32, SwarmError> {
        self.by_id
            .iter()
            .find(|(_, m)| m.as_str() == message)
            .map(|(id, _)| *id)
            .ok_or_else(|| SwarmError::MissingMessage(message.to_string()))
    }

    pub fn message_of(&self, base_id: u32) -> Option<&str> {
        self.by_id.get(&base_id).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Waiting,
    Approaching,
    Latched,
}

/// One robot in the formation.
#[derive(Debug, Clone)]
pub struct SwarmRobot {
    pub id: u32,
    pub boat: BoatState,
    /// Message base ID currently displayed on the robot's LCD bundle.
    pub displayed_base_id: u32,
    pub phase: Phase,
    /// Index (into the scenario robot list) of the robot ahead, if any.
    pub sees: Option<usize>,
    // per-robot estimator state
    win: FilterWindow,
    vote_window: VecDeque<u32>,
}

impl SwarmRobot {
    fn new(id: u32, boat: BoatState, stand_by_id: u32, sees: Option<usize>, cap: usize) -> Self {
        SwarmRobot {
            id,
            boat,
            displayed_base_id: stand_by_id,
            phase: Phase::Waiting,
            sees,
            win: FilterWindow::new(cap).unwrap_or_else(|_| FilterWindow::new(1).unwrap()),
            vote_window: VecDeque::with_capacity(cap),
        }
    }
}

/// Encode a robot's state as the tag message it should display.
pub fn encode_state(
    phase: Phase,
    commanding_formation: bool,
    codebook: &TagCodebook,
) -> Result<u32, SwarmError> {
    let msg = if commanding_formation {
        MSG_FORM_TRAIN_LINK
    } else {
        match phase {
            Phase::Latched => MSG_LATCHED_FORM_TRAIN_LINK,
            Phase::Waiting | Phase::Approaching => MSG_STAND_BY,
        }
    };
    codebook.id_of(msg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SwarmEventKind {
    TagChanged { base_id: u32 },
    LatchSuccess,
    LatchFail,
    Phase { phase: Phase },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwarmEvent {
    pub tick: u64,
    pub robot: u32,
    #[serde(flatten)]
    pub kind: SwarmEventKind,
}

/// Scenario wiring and tunables.
#[derive(Debug, Clone)]
pub struct FormationScenario {
    pub robots: Vec<SwarmRobot>,
    pub codebook: TagCodebook,
    pub bundle: BundleGeometry,
    pub intrinsics: CameraIntrinsics,
    pub profile: NoiseProfile,
    pub estimator: EstimatorConfig,
    pub thresholds: LatchThresholds,
    pub gains: Gains,
    pub limits: VelocityLimits,
    /// Guidance/contact distance between latched hulls, mm.
    pub contact_dx_mm: f64,
    pub tick_hz: f64,
    /// Tick at which the lead robot raises the formation command.
    pub command_tick: u64,
    pub events: Vec<SwarmEvent>,
    tick: u64,
}

impl FormationScenario {
    /// Robots in a line along +X: robot 0 leads, each next one `spacing_mm`
    /// behind, all heading +X so each camera sees the bundle on the stern of
    /// the robot ahead.
    pub fn train_link(
        n_robots: usize,
        spacing_mm: f64,
        bundle: BundleGeometry,
        intrinsics: CameraIntrinsics,
        profile: NoiseProfile,
        estimator: EstimatorConfig,
        command_tick: u64,
    ) -> Result<Self, SwarmError> {
        if n_robots < 2 {
            return Err(SwarmError::TooFewRobots);
        }
        if spacing_mm <= 0.0 {
            return Err(SwarmError::BadSpacing);
        }
        let codebook = TagCodebook::default_train_link();
        let stand_by = codebook.id_of(MSG_STAND_BY)?;
        let cap = estimator.window_capacity;
        let robots = (0..n_robots)
            .map(|i| {
                let x = -(i as f64) * spacing_mm;
                let sees = if i == 0 { None } else { Some(i - 1) };
                SwarmRobot::new(i as u32 + 1, BoatState::at(x, 0.0, 0.0), stand_by, sees, cap)
            })
            .collect();
        Ok(FormationScenario {
            robots,
            codebook,
            bundle,
            intrinsics,
            profile,
            estimator,
            thresholds: LatchThresholds::outdoor(),
            gains: Gains::default(),
            limits: VelocityLimits::default(),
            contact_dx_mm: 500.0,
            tick_hz: 30.0,
            command_tick,
            events: Vec::new(),
            tick: 0,
        })
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    fn push_event(&mut self, robot: u32, kind: SwarmEventKind) {
        self.events.push(SwarmEvent {
            tick: self.tick,
            robot,
            kind,
        });
    }
}

/// What one robot saw on the robot ahead this frame.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub base_id: u32,
    pub planar: PlanarPose,
    pub estimate: BundleEstimate,
}

/// Run the detection pass of `observer` against the bundle displayed by the
/// robot ahead. The displayed IDs are `displayed_base * 8 + slot`; geometry
/// is slot-keyed, so an ID change never moves a corner.
pub fn observe(
    scenario: &FormationScenario,
    observer: usize,
    displayed_base: &[u32],
    frame: u64,
) -> Option<(Observation, FilterWindow, VecDeque<u32>)> {
    let robot = &scenario.robots[observer];
    let ahead_idx = robot.sees?;
    let ahead = &scenario.robots[ahead_idx];

    // bundle mounted on the stern of the robot ahead, facing back
    let bundle_world = world_from_bundle(
        Vector2::new(ahead.boat.position.x, ahead.boat.position.y),
        wrap_deg(ahead.boat.heading_deg + 180.0),
    );
    let truth = world_from_camera(&robot.boat).invert().compose(&bundle_world);

    // display the current message on every slot
    let mut displayed = scenario.bundle.clone();
    for (slot, p) in displayed.placements.iter_mut().enumerate() {
        p.tag_id = displayed_base[ahead_idx] * TAG_SLOT_STRIDE + slot as u32;
    }
    let mut profile = scenario.profile.clone();
    profile.seed ^= (observer as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let fsim = simulate_frame(&truth, &displayed, &scenario.intrinsics, &profile, frame);
    if fsim.detections.is_empty() {
        return None;
    }

    // decode: majority vote of the base IDs in this frame's window
    let mut vote_window = robot.vote_window.clone();
    for det in &fsim.detections {
        if vote_window.len() == scenario.estimator.window_capacity {
            vote_window.pop_front();
        }
        vote_window.push_back(det.tag_id / TAG_SLOT_STRIDE);
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for id in &vote_window {
        *counts.entry(*id).or_insert(0) += 1;
    }
    let base_id = *counts
        .iter()
        .max_by_key(|(_, c)| **c)
        .map(|(id, _)| id)
        .expect("vote window non-empty");

    // remap detections back to canonical placement IDs for estimation
    let mut dets = fsim.detections;
    for d in dets.iter_mut() {
        let slot = (d.tag_id % TAG_SLOT_STRIDE) as usize;
        d.tag_id = scenario.bundle.placements[slot].tag_id;
    }
    let mut win = robot.win.clone();
    let est = estimate_bundle(
        &dets,
        &scenario.bundle,
        &scenario.intrinsics,
        &mut win,
        &scenario.estimator,
    )?;
    Some((
        Observation {
            base_id,
            planar: to_planar(&est.camera_from_bundle),
            estimate: est,
        },
        win,
        vote_window,
    ))
}

/// Advance the whole formation one tick (two-phase: all observations use the
/// displayed tags from the previous tick).
pub fn step_swarm(scenario: &mut FormationScenario) -> Result<(), SwarmError> {
    let dt = 1.0 / scenario.tick_hz;
    let frame = scenario.tick;
    let displayed: Vec<u32> = scenario.robots.iter().map(|r| r.displayed_base_id).collect();

    // leader raises the formation command at the configured tick
    if frame == scenario.command_tick {
        let cmd_id = encode_state(scenario.robots[0].phase, true, &scenario.codebook)?;
        if scenario.robots[0].displayed_base_id != cmd_id {
            scenario.robots[0].displayed_base_id = cmd_id;
            self_event(scenario, 0, SwarmEventKind::TagChanged { base_id: cmd_id });
        }
    }

    // phase 1: observe and decide, against the snapshot
    struct Decision {
        idx: usize,
        obs: Option<(Observation, FilterWindow, VecDeque<u32>)>,
    }
    let decisions: Vec<Decision> = (0..scenario.robots.len())
        .map(|idx| Decision {
            idx,
            obs: observe(scenario, idx, &displayed, frame),
        })
        .collect();

    // phase 2: apply transitions and motion
    for d in decisions {
        let idx = d.idx;
        let (obs, win, votes) = match d.obs {
            Some((o, w, v)) => (Some(o), Some(w), Some(v)),
            None => (None, None, None),
        };
        if let Some(w) = win {
            scenario.robots[idx].win = w;
        }
        if let Some(v) = votes {
            scenario.robots[idx].vote_window = v;
        }
        let phase = scenario.robots[idx].phase;
        match phase {
            Phase::Waiting => {
                if let Some(o) = &obs {
                    if let Some(msg) = scenario.codebook.message_of(o.base_id) {
                        if msg == MSG_FORM_TRAIN_LINK || msg == MSG_LATCHED_FORM_TRAIN_LINK {
                            scenario.robots[idx].phase = Phase::Approaching;
                            self_event(
                                scenario,
                                idx,
                                SwarmEventKind::Phase {
                                    phase: Phase::Approaching,
                                },
                            );
                        }
                    }
                }
            }
            Phase::Approaching => {
                // aim one hull-length inside the contact plane so the boat
                // actually crosses it instead of converging onto it
                let cmd = match &obs {
                    Some(o) => guidance(
                        &o.planar,
                        &scenario.gains,
                        (scenario.contact_dx_mm - 100.0).max(0.0),
                    ),
                    None => Command::default(),
                };
                let boat = step_boat(&scenario.robots[idx].boat, &cmd, dt, &scenario.limits);
                scenario.robots[idx].boat = boat;
                // contact check on the true relative pose
                let ahead = scenario.robots[idx].sees.expect("approaching robot sees ahead");
                let bundle_world = world_from_bundle(
                    Vector2::new(
                        scenario.robots[ahead].boat.position.x,
                        scenario.robots[ahead].boat.position.y,
                    ),
                    wrap_deg(scenario.robots[ahead].boat.heading_deg + 180.0),
                );
                let truth = world_from_camera(&scenario.robots[idx].boat)
                    .invert()
                    .compose(&bundle_world);
                let truth_planar = to_planar(&truth);
                if truth_planar.d_x <= scenario.contact_dx_mm {
                    if check_latch(&truth_planar, &scenario.thresholds) {
                        scenario.robots[idx].phase = Phase::Latched;
                        self_event(scenario, idx, SwarmEventKind::LatchSuccess);
                        self_event(
                            scenario,
                            idx,
                            SwarmEventKind::Phase {
                                phase: Phase::Latched,
                            },
                        );
                        let new_id =
                            encode_state(Phase::Latched, false, &scenario.codebook)?;
                        if scenario.robots[idx].displayed_base_id != new_id {
                            scenario.robots[idx].displayed_base_id = new_id;
                            self_event(
                                scenario,
                                idx,
                                SwarmEventKind::TagChanged { base_id: new_id },
                            );
                        }
                    } else {
                        // back off and keep trying
                        self_event(scenario, idx, SwarmEventKind::LatchFail);
                        let h = scenario.robots[idx].boat.heading_deg.to_radians();
                        let back = Vector2::new(h.cos(), h.sin()) * -500.0;
                        scenario.robots[idx].boat.position += back;
                    }
                }
            }
            Phase::Latched => {}
        }
    }
    scenario.tick += 1;
    Ok(())
}

fn self_event(scenario: &mut FormationScenario, idx: usize, kind: SwarmEventKind) {
    let robot_id = scenario.robots[idx].id;
    scenario.push_event(robot_id, kind);
}

/// True iff every non-leader robot has latched its predecessor.
pub fn formation_complete(scenario: &FormationScenario) -> bool {
    scenario
        .robots
        .iter()
        .skip(1)
        .all(|r| r.phase == Phase::Latched)
}

/// Run until the formation completes or `max_ticks` elapse. Returns whether
/// it completed.
pub fn run_formation(scenario: &mut FormationScenario, max_ticks: u64) -> Result<bool, SwarmError> {
    for _ in 0..max_ticks {
        if formation_complete(scenario) {
            return Ok(true);
        }
        step_swarm(scenario)?;
    }
    Ok(formation_complete(scenario))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_bundle;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn zero_noise_scenario(n: usize, command_tick: u64) -> FormationScenario {
        FormationScenario::train_link(
            n,
            1000.0,
            build_bundle(130.0, 1, 10.0, 0.0).unwrap(),
            intrinsics(),
            NoiseProfile::zero(21),
            EstimatorConfig::default(),
            command_tick,
        )
        .unwrap()
    }

    #[test]
    fn codebook_bijection_enforced() {
        let mut m = BTreeMap::new();
        m.insert(0, "A".to_string());
        m.insert(1, "A".to_string());
        assert!(TagCodebook::try_from(m).is_err());
    }

    #[test]
    fn encode_state_messages() {
        let cb = TagCodebook::default_train_link();
        assert_eq!(encode_state(Phase::Waiting, true, &cb).unwrap(), cb.id_of(MSG_FORM_TRAIN_LINK).unwrap());
        assert_eq!(
            encode_state(Phase::Latched, false, &cb).unwrap(),
            cb.id_of(MSG_LATCHED_FORM_TRAIN_LINK).unwrap()
        );
        assert_eq!(
            encode_state(Phase::Waiting, false, &cb).unwrap(),
            cb.id_of(MSG_STAND_BY).unwrap()
        );
    }

    #[test]
    fn encode_state_missing_entry_is_error() {
        let mut m = BTreeMap::new();
        m.insert(0, MSG_STAND_BY.to_string());
        let cb = TagCodebook::try_from(m).unwrap();
        assert!(encode_state(Phase::Latched, false, &cb).is_err());
    }

    #[test]
    fn observe_reads_pose_and_id() {
        let s = zero_noise_scenario(2, 1);
        let displayed: Vec<u32> = s.robots.iter().map(|r| r.displayed_base_id).collect();
        let (obs, _, _) = observe(&s, 1, &displayed, 0).unwrap();
        assert_eq!(obs.base_id, 0); // STAND_BY
        assert!((obs.planar.d_x - 1000.0).abs() < 1.0);
        assert!(obs.planar.d_y.abs() < 0.5);
    }

    #[test]
    fn observe_nothing_when_occluded() {
        let mut s = zero_noise_scenario(2, 1);
        // robot ahead way off to the side: no tag in view
        s.robots[0].boat.position.y = 100_000.0;
        let displayed: Vec<u32> = s.robots.iter().map(|r| r.displayed_base_id).collect();
        assert!(observe(&s, 1, &displayed, 0).is_none());
    }

    #[test]
    fn three_robot_train_link_completes_in_order() {
        let mut s = zero_noise_scenario(3, 1);
        let done = run_formation(&mut s, 20_000).unwrap();
        assert!(done, "events: {:?}", s.events);
        // expected causal order of key events
        let key: Vec<(u32, String)> = s
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                SwarmEventKind::TagChanged { .. } => Some((e.robot, "tag".into())),
                SwarmEventKind::LatchSuccess => Some((e.robot, "latch".into())),
                SwarmEventKind::Phase { phase: Phase::Approaching } => {
                    Some((e.robot, "approach".into()))
                }
                _ => None,
            })
            .collect();
        let expected: Vec<(u32, String)> = vec![
            (1, "tag".into()),
            (2, "approach".into()),
            (2, "latch".into()),
            (2, "tag".into()),
            (3, "approach".into()),
            (3, "latch".into()),
            (3, "tag".into()),
        ];
        assert_eq!(key, expected);
    }

    #[test]
    fn leader_never_commands_no_motion() {
        let mut s = zero_noise_scenario(3, u64::MAX); // command never issued
        for _ in 0..500 {
            step_swarm(&mut s).unwrap();
        }
        assert!(!formation_complete(&s));
        for r in s.robots.iter().skip(1) {
            assert_eq!(r.phase, Phase::Waiting);
        }
        assert!(s.events.is_empty());
    }

    #[test]
    fn five_robot_chain_has_four_tag_changes_before_completion() {
        let mut s = zero_noise_scenario(5, 1);
        let mut changes_before_completion = 0;
        for _ in 0..60_000 {
            if formation_complete(&s) {
                break;
            }
            step_swarm(&mut s).unwrap();
            if formation_complete(&s) {
                // count tag changes strictly before this tick
                changes_before_completion = s
                    .events
                    .iter()
                    .filter(|e| {
                        matches!(e.kind, SwarmEventKind::TagChanged { .. }) && e.tick < s.tick() - 1
                    })
                    .count();
                break;
            }
        }
        assert!(formation_complete(&s));
        assert_eq!(changes_before_completion, 4);
    }

    #[test]
    fn removing_visibility_freezes_phase() {
        let mut s = zero_noise_scenario(3, 1);
        s.robots[2].sees = None;
        for _ in 0..2000 {
            step_swarm(&mut s).unwrap();
        }
        assert_eq!(s.robots[2].phase, Phase::Waiting);
    }
}
