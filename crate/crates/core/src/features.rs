//! Linguistic feature vocabularies and the numeric-to-category conversions
//! used by the perception side.
//!
//! Every input to the predictor is one of twelve categorical slots. Each slot
//! has a three-valued vocabulary and labels are globally unique, so a label
//! alone identifies both its slot and its knowledge-graph entity.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of feature slots in a [`FeatureVector`].
pub const SLOT_COUNT: usize = 12;

/// Size of every slot vocabulary.
pub const VOCAB_SIZE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("unknown label `{label}` for slot {slot}")]
    UnknownLabel { slot: Slot, label: String },
    #[error("expected {SLOT_COUNT} feature tokens, found {0}")]
    TokenCount(usize),
    #[error("NaN is not a valid time value")]
    NotANumber,
    #[error("time headway must be non-negative, got {0}")]
    NegativeHeadway(f64),
    #[error("invalid kinematic snapshot: {0}")]
    InvalidSnapshot(&'static str),
}

/// The twelve input slots, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    LateralVelocity,
    LateralAcceleration,
    LeftPrecedingTtc,
    PrecedingTtc,
    RightPrecedingTtc,
    LeftFollowingTtc,
    RightFollowingTtc,
    PrecedingThw,
    LanePosition,
    LaneId,
    HighestAttractionLane,
    HighestFrontalGapLane,
}

impl Slot {
    pub const ALL: [Slot; SLOT_COUNT] = [
        Slot::LateralVelocity,
        Slot::LateralAcceleration,
        Slot::LeftPrecedingTtc,
        Slot::PrecedingTtc,
        Slot::RightPrecedingTtc,
        Slot::LeftFollowingTtc,
        Slot::RightFollowingTtc,
        Slot::PrecedingThw,
        Slot::LanePosition,
        Slot::LaneId,
        Slot::HighestAttractionLane,
        Slot::HighestFrontalGapLane,
    ];

    /// Position of the slot in canonical order.
    pub fn position(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::LateralVelocity => "lateral_velocity",
            Slot::LateralAcceleration => "lateral_acceleration",
            Slot::LeftPrecedingTtc => "left_preceding_ttc",
            Slot::PrecedingTtc => "preceding_ttc",
            Slot::RightPrecedingTtc => "right_preceding_ttc",
            Slot::LeftFollowingTtc => "left_following_ttc",
            Slot::RightFollowingTtc => "right_following_ttc",
            Slot::PrecedingThw => "preceding_thw",
            Slot::LanePosition => "lane_position",
            Slot::LaneId => "lane_id",
            Slot::HighestAttractionLane => "highest_attraction_lane",
            Slot::HighestFrontalGapLane => "highest_frontal_gap_lane",
        }
    }

    /// Knowledge-graph predicate linking a vehicle to its category in this slot.
    ///
    /// Derived from the slot name: upper-cased, `_ttc`/`_thw` become
    /// `_VEHICLE_TTC`/`_VEHICLE_THW`, and `_IS` is appended.
    pub fn predicate(self) -> &'static str {
        match self {
            Slot::LateralVelocity => "LATERAL_VELOCITY_IS",
            Slot::LateralAcceleration => "LATERAL_ACCELERATION_IS",
            Slot::LeftPrecedingTtc => "LEFT_PRECEDING_VEHICLE_TTC_IS",
            Slot::PrecedingTtc => "PRECEDING_VEHICLE_TTC_IS",
            Slot::RightPrecedingTtc => "RIGHT_PRECEDING_VEHICLE_TTC_IS",
            Slot::LeftFollowingTtc => "LEFT_FOLLOWING_VEHICLE_TTC_IS",
            Slot::RightFollowingTtc => "RIGHT_FOLLOWING_VEHICLE_TTC_IS",
            Slot::PrecedingThw => "PRECEDING_VEHICLE_THW_IS",
            Slot::LanePosition => "LANE_POSITION_IS",
            Slot::LaneId => "LANE_ID_IS",
            Slot::HighestAttractionLane => "HIGHEST_ATTRACTION_LANE_IS",
            Slot::HighestFrontalGapLane => "HIGHEST_FRONTAL_GAP_LANE_IS",
        }
    }

    /// Ordered vocabulary. For risk-valued slots index 0 is the most severe.
    pub fn vocabulary(self) -> &'static [&'static str; VOCAB_SIZE] {
        match self {
            Slot::LateralVelocity => &["movingLeft", "movingStraight", "movingRight"],
            Slot::LateralAcceleration => &[
                "leftLateralAcceleration",
                "zeroLateralAcceleration",
                "rightLateralAcceleration",
            ],
            Slot::LeftPrecedingTtc => &[
                "highRiskLeftPreceding",
                "mediumRiskLeftPreceding",
                "lowRiskLeftPreceding",
            ],
            Slot::PrecedingTtc => &["highRiskPreceding", "mediumRiskPreceding", "lowRiskPreceding"],
            Slot::RightPrecedingTtc => &[
                "highRiskRightPreceding",
                "mediumRiskRightPreceding",
                "lowRiskRightPreceding",
            ],
            Slot::LeftFollowingTtc => &[
                "highRiskLeftFollowing",
                "mediumRiskLeftFollowing",
                "lowRiskLeftFollowing",
            ],
            Slot::RightFollowingTtc => &[
                "highRiskRightFollowing",
                "mediumRiskRightFollowing",
                "lowRiskRightFollowing",
            ],
            Slot::PrecedingThw => &["collisionRiskHeadway", "riskyHeadway", "safeHeadway"],
            Slot::LanePosition => &["leftOfTheLane", "centerOfTheLane", "rightOfTheLane"],
            Slot::LaneId => &["leftmostLane", "middleLane", "rightmostLane"],
            Slot::HighestAttractionLane => &[
                "leftLaneMostAttractive",
                "currentLaneMostAttractive",
                "rightLaneMostAttractive",
            ],
            Slot::HighestFrontalGapLane => &["leftLaneHighestGap", "currentLaneHighestGap", "rightLaneHighestGap"],
        }
    }

    pub fn label(self, index: u8) -> &'static str {
        self.vocabulary()[index as usize]
    }

    pub fn index_of(self, label: &str) -> Option<u8> {
        self.vocabulary().iter().position(|l| *l == label).map(|i| i as u8)
    }

    pub fn from_name(name: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The three maneuver hypotheses. Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intention {
    Llc,
    Lk,
    Rlc,
}

impl Intention {
    pub const ALL: [Intention; 3] = [Intention::Llc, Intention::Lk, Intention::Rlc];

    pub fn as_str(self) -> &'static str {
        match self {
            Intention::Llc => "LLC",
            Intention::Lk => "LK",
            Intention::Rlc => "RLC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Intention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LLC" => Ok(Intention::Llc),
            "LK" => Ok(Intention::Lk),
            "RLC" => Ok(Intention::Rlc),
            other => Err(format!("unknown intention `{other}`")),
        }
    }
}

/// A total assignment of one category to each of the twelve slots.
///
/// Stored as vocabulary indices; labels are resolved on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureVector {
    cats: [u8; SLOT_COUNT],
}

impl FeatureVector {
    /// Number of distinct vectors (3^12).
    pub const SPACE_SIZE: usize = 531_441;

    /// Builds a vector from vocabulary indices. Panics if an index is out of range.
    pub fn from_indices(cats: [u8; SLOT_COUNT]) -> Self {
        assert!(
            cats.iter().all(|&c| (c as usize) < VOCAB_SIZE),
            "category index out of range"
        );
        Self { cats }
    }

    pub fn indices(&self) -> [u8; SLOT_COUNT] {
        self.cats
    }

    pub fn get(&self, slot: Slot) -> &'static str {
        slot.label(self.cats[slot.position()])
    }

    pub fn index(&self, slot: Slot) -> u8 {
        self.cats[slot.position()]
    }

    pub fn with_index(mut self, slot: Slot, index: u8) -> Self {
        assert!((index as usize) < VOCAB_SIZE);
        self.cats[slot.position()] = index;
        self
    }

    pub fn with_label(self, slot: Slot, label: &str) -> Result<Self, FeatureError> {
        let idx = slot.index_of(label).ok_or_else(|| FeatureError::UnknownLabel {
            slot,
            label: label.to_string(),
        })?;
        Ok(self.with_index(slot, idx))
    }

    /// Labels in canonical slot order.
    pub fn labels(&self) -> impl Iterator<Item = (Slot, &'static str)> + '_ {
        Slot::ALL.into_iter().map(move |s| (s, self.get(s)))
    }

    /// Mixed-radix rank of the vector in `0..SPACE_SIZE`, first slot most significant.
    pub fn rank(&self) -> usize {
        self.cats.iter().fold(0usize, |acc, &c| acc * VOCAB_SIZE + c as usize)
    }

    pub fn from_rank(mut rank: usize) -> Self {
        assert!(rank < Self::SPACE_SIZE, "rank out of range");
        let mut cats = [0u8; SLOT_COUNT];
        for c in cats.iter_mut().rev() {
            *c = (rank % VOCAB_SIZE) as u8;
            rank /= VOCAB_SIZE;
        }
        Self { cats }
    }

    /// Canonical token string: twelve labels joined by commas.
    pub fn to_tokens(&self) -> String {
        let mut out = String::with_capacity(256);
        for (i, (_, label)) in self.labels().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(label);
        }
        out
    }

    pub fn parse_tokens(s: &str) -> Result<Self, FeatureError> {
        let parts: Vec<&str> = s.split(',').collect();
        Self::from_labels(&parts)
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self, FeatureError> {
        if labels.len() != SLOT_COUNT {
            return Err(FeatureError::TokenCount(labels.len()));
        }
        let mut cats = [0u8; SLOT_COUNT];
        for (slot, label) in Slot::ALL.into_iter().zip(labels) {
            let label = label.as_ref();
            cats[slot.position()] = slot.index_of(label).ok_or_else(|| FeatureError::UnknownLabel {
                slot,
                label: label.to_string(),
            })?;
        }
        Ok(Self { cats })
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tokens())
    }
}

impl FromStr for FeatureVector {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_tokens(s)
    }
}

/// Time-to-collision risk level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TtcRisk {
    High,
    Medium,
    Low,
}

impl TtcRisk {
    pub const ALL: [TtcRisk; 3] = [TtcRisk::High, TtcRisk::Medium, TtcRisk::Low];

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Label of this level inside one of the five TTC slots.
    pub fn label(self, slot: Slot) -> &'static str {
        slot.label(self.index())
    }
}

/// Time-headway risk level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThwRisk {
    CollisionRisk,
    Risky,
    Safe,
}

impl ThwRisk {
    pub const ALL: [ThwRisk; 3] = [ThwRisk::CollisionRisk, ThwRisk::Risky, ThwRisk::Safe];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn label(self) -> &'static str {
        Slot::PrecedingThw.label(self.index())
    }
}

/// Measured quantities between the target vehicle and the vehicle ahead of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSnapshot {
    /// Bumper-to-bumper distance in meters. Infinite when nothing is ahead.
    pub gap_to_preceding: f64,
    pub tv_speed: f64,
    pub pv_speed: f64,
    pub timestamp: f64,
}

impl KinematicSnapshot {
    pub fn new(gap_to_preceding: f64, tv_speed: f64, pv_speed: f64, timestamp: f64) -> Result<Self, FeatureError> {
        if gap_to_preceding.is_nan() || gap_to_preceding < 0.0 {
            return Err(FeatureError::InvalidSnapshot("gap must be >= 0"));
        }
        if !(tv_speed >= 0.0 && tv_speed.is_finite()) {
            return Err(FeatureError::InvalidSnapshot("tv speed must be finite and >= 0"));
        }
        if !(pv_speed >= 0.0 && pv_speed.is_finite()) {
            return Err(FeatureError::InvalidSnapshot("pv speed must be finite and >= 0"));
        }
        Ok(Self {
            gap_to_preceding,
            tv_speed,
            pv_speed,
            timestamp,
        })
    }
}

/// Gap over closing speed. Zero closing speed gives `+inf`; an opening gap is negative.
pub fn compute_ttc(snapshot: &KinematicSnapshot) -> f64 {
    let closing = snapshot.tv_speed - snapshot.pv_speed;
    if closing == 0.0 {
        f64::INFINITY
    } else {
        snapshot.gap_to_preceding / closing
    }
}

/// Gap over own speed; `+inf` when stationary.
pub fn compute_thw(snapshot: &KinematicSnapshot) -> f64 {
    if snapshot.tv_speed == 0.0 {
        f64::INFINITY
    } else {
        snapshot.gap_to_preceding / snapshot.tv_speed
    }
}

/// `[0,4)` high, `[4,10)` medium, everything else (including negatives) low.
pub fn ttc_to_category(ttc: f64) -> Result<TtcRisk, FeatureError> {
    if ttc.is_nan() {
        return Err(FeatureError::NotANumber);
    }
    Ok(if ttc < 0.0 {
        TtcRisk::Low
    } else if ttc < 4.0 {
        TtcRisk::High
    } else if ttc < 10.0 {
        TtcRisk::Medium
    } else {
        TtcRisk::Low
    })
}

/// `[0,1)` collision risk, `[1,2)` risky, `>= 2` safe.
pub fn thw_to_category(thw: f64) -> Result<ThwRisk, FeatureError> {
    if thw.is_nan() {
        return Err(FeatureError::NotANumber);
    }
    if thw < 0.0 {
        return Err(FeatureError::NegativeHeadway(thw));
    }
    Ok(if thw < 1.0 {
        ThwRisk::CollisionRisk
    } else if thw < 2.0 {
        ThwRisk::Risky
    } else {
        ThwRisk::Safe
    })
}

/// Values for the ten slots that are not measured at runtime.
///
/// The preceding-vehicle TTC and THW slots of `base` are ignored; they are
/// overwritten by [`assemble_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScenarioPreset {
    base: FeatureVector,
}

impl ScenarioPreset {
    pub const DYNAMIC_SLOTS: [Slot; 2] = [Slot::PrecedingTtc, Slot::PrecedingThw];

    pub fn new(base: FeatureVector) -> Self {
        let base = base.with_index(Slot::PrecedingTtc, 0).with_index(Slot::PrecedingThw, 0);
        Self { base }
    }

    /// Template vector with the dynamic slots zeroed.
    pub fn base(&self) -> FeatureVector {
        self.base
    }

    pub fn is_fixed(slot: Slot) -> bool {
        !Self::DYNAMIC_SLOTS.contains(&slot)
    }

    /// Token string with `*` in the two dynamic positions.
    pub fn to_pattern(&self) -> String {
        Slot::ALL
            .into_iter()
            .map(|s| if Self::is_fixed(s) { self.base.get(s) } else { "*" })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_pattern(s: &str) -> Result<Self, FeatureError> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != SLOT_COUNT {
            return Err(FeatureError::TokenCount(parts.len()));
        }
        let mut v = FeatureVector::from_indices([0; SLOT_COUNT]);
        for (slot, label) in Slot::ALL.into_iter().zip(parts) {
            if Self::is_fixed(slot) {
                v = v.with_label(slot, label)?;
            } else if label != "*" {
                return Err(FeatureError::UnknownLabel {
                    slot,
                    label: label.to_string(),
                });
            }
        }
        Ok(Self::new(v))
    }

    pub fn matches(&self, v: &FeatureVector) -> bool {
        Slot::ALL
            .into_iter()
            .filter(|s| Self::is_fixed(*s))
            .all(|s| v.index(s) == self.base.index(s))
    }
}

impl Default for ScenarioPreset {
    /// Straight-moving TV centered in the rightmost lane, all other neighbors
    /// low risk, left lane free with the largest gap and highest attraction.
    fn default() -> Self {
        let labels = [
            "movingStraight",
            "zeroLateralAcceleration",
            "lowRiskLeftPreceding",
            "highRiskPreceding",
            "lowRiskRightPreceding",
            "lowRiskLeftFollowing",
            "lowRiskRightFollowing",
            "collisionRiskHeadway",
            "centerOfTheLane",
            "rightmostLane",
            "leftLaneMostAttractive",
            "leftLaneHighestGap",
        ];
        Self::new(FeatureVector::from_labels(&labels).expect("default preset labels are valid"))
    }
}

/// Places the two measured categories into the preset template.
pub fn assemble_features(ttc: TtcRisk, thw: ThwRisk, preset: &ScenarioPreset) -> FeatureVector {
    preset
        .base()
        .with_index(Slot::PrecedingTtc, ttc.index())
        .with_index(Slot::PrecedingThw, thw.index())
}
