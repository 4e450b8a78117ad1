//! Scripted channel attacks on telemetry, built as network taps.

use serde::{Deserialize, Serialize};

use crate::auth::KeyStore;
use crate::plant::TelemetrySample;
use crate::runtime::{ChannelTap, ReplayTap, TapTransform, TapWindow};
use crate::types::{EntityId, Ms, Quantity};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// Multiplies every value. With `forge` the attacker holds the victim's
    /// key and re-signs, otherwise the original tag goes stale.
    Scale {
        factor: f64,
        #[serde(default = "yes")]
        forge: bool,
    },
    /// Silently discards every message.
    Drop,
    /// Records `[capture_start_ms, capture_end_ms)` and substitutes the
    /// recording, in order and looping, for live traffic.
    Replay {
        capture_start_ms: Ms,
        capture_end_ms: Ms,
    },
    /// Injects one sample from `source` next to every passing message.
    /// Quantity and unit default to those of the carried message.
    Spoof {
        source: EntityId,
        value: f64,
        #[serde(default)]
        quantity: Option<Quantity>,
        #[serde(default)]
        unit: Option<String>,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Scale { .. } => "scale",
            AttackKind::Drop => "drop",
            AttackKind::Replay { .. } => "replay",
            AttackKind::Spoof { .. } => "spoof",
        }
    }
}

/// One attack on one channel over `[start_ms, end_ms)`; open-ended when
/// `end_ms` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScript {
    pub channel: String,
    pub start_ms: Ms,
    #[serde(default)]
    pub end_ms: Option<Ms>,
    #[serde(flatten)]
    pub kind: AttackKind,
}

impl AttackScript {
    pub fn window(&self) -> TapWindow {
        TapWindow {
            start: self.start_ms,
            end: self.end_ms,
        }
    }

    /// One-line description used in reports and evidence.
    pub fn describe(&self) -> String {
        let end = self.end_ms.map_or("open".to_string(), |e| e.to_string());
        let detail = match &self.kind {
            AttackKind::Scale { factor, forge } => format!(" factor={factor} forge={forge}"),
            AttackKind::Drop => String::new(),
            AttackKind::Replay {
                capture_start_ms,
                capture_end_ms,
            } => format!(" capture={capture_start_ms}..{capture_end_ms}"),
            AttackKind::Spoof { source, value, .. } => format!(" source={source} value={value}"),
        };
        format!(
            "{} channel={} window={}..{}{}",
            self.kind.name(),
            self.channel,
            self.start_ms,
            end,
            detail
        )
    }

    /// Builds the tap. Forging and spoofing draw keys from `keys`, standing
    /// in for key material the attacker has obtained.
    pub fn build(&self, keys: &KeyStore) -> ChannelTap<TelemetrySample> {
        let w = self.window();
        match &self.kind {
            AttackKind::Scale { factor, forge } => ChannelTap::new(
                &self.channel,
                w,
                ScaleTap {
                    factor: *factor,
                    keys: forge.then(|| keys.clone()),
                },
            ),
            AttackKind::Drop => ChannelTap::new(&self.channel, w, DropTap),
            AttackKind::Replay {
                capture_start_ms,
                capture_end_ms,
            } => ChannelTap::new(
                &self.channel,
                w,
                ReplayTap::<TelemetrySample>::new(TapWindow::new(
                    *capture_start_ms,
                    *capture_end_ms,
                )),
            ),
            AttackKind::Spoof {
                source,
                value,
                quantity,
                unit,
            } => ChannelTap::new(
                &self.channel,
                w,
                SpoofTap {
                    key: keys.key(source.as_str()),
                    source: source.clone(),
                    value: *value,
                    quantity: *quantity,
                    unit: unit.clone(),
                    seq: 0,
                },
            ),
        }
    }
}

pub struct ScaleTap {
    pub factor: f64,
    pub keys: Option<KeyStore>,
}

impl TapTransform<TelemetrySample> for ScaleTap {
    fn transform(&mut self, _now: Ms, mut msg: TelemetrySample) -> Vec<TelemetrySample> {
        msg.value *= self.factor;
        if let Some(keys) = &self.keys {
            msg.resign(&keys.key(msg.source.as_str()));
        }
        vec![msg]
    }
}

pub struct DropTap;

impl TapTransform<TelemetrySample> for DropTap {
    fn transform(&mut self, _now: Ms, _msg: TelemetrySample) -> Vec<TelemetrySample> {
        Vec::new()
    }
}

pub struct SpoofTap {
    source: EntityId,
    key: [u8; 32],
    value: f64,
    quantity: Option<Quantity>,
    unit: Option<String>,
    seq: u64,
}

impl TapTransform<TelemetrySample> for SpoofTap {
    fn transform(&mut self, now: Ms, msg: TelemetrySample) -> Vec<TelemetrySample> {
        self.seq += 1;
        let mut forged = TelemetrySample {
            source: self.source.clone(),
            quantity: self.quantity.unwrap_or(msg.quantity),
            value: self.value,
            unit: self.unit.clone().unwrap_or_else(|| msg.unit.clone()),
            ts: now,
            seq: self.seq,
            auth_tag: [0; 32],
        };
        forged.resign(&self.key);
        vec![msg, forged]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::verify_tag;
    use crate::runtime::Network;

    fn sample(ts: Ms, seq: u64, keys: &KeyStore) -> TelemetrySample {
        let mut s = TelemetrySample {
            source: "speed-1".into(),
            quantity: Quantity::Speed,
            value: 1.0,
            unit: "m/s".into(),
            ts,
            seq,
            auth_tag: [0; 32],
        };
        s.resign(&keys.key("speed-1"));
        s
    }

    fn net(script: &AttackScript, keys: &KeyStore) -> Network<TelemetrySample> {
        let mut n = Network::new();
        n.add_channel("speed-1");
        n.tap_install(script.build(keys)).unwrap();
        n
    }

    fn script(kind: AttackKind) -> AttackScript {
        AttackScript {
            channel: "speed-1".into(),
            start_ms: 1000,
            end_ms: Some(2000),
            kind,
        }
    }

    #[test]
    fn parses_flat_json() {
        let s: AttackScript = serde_json::from_str(
            r#"{"kind":"scale","channel":"speed-1","start_ms":30000,"factor":1.5}"#,
        )
        .unwrap();
        assert_eq!(
            s.kind,
            AttackKind::Scale {
                factor: 1.5,
                forge: true
            }
        );
        assert_eq!(s.end_ms, None);
    }

    #[test]
    fn forged_scale_keeps_valid_tag() {
        let keys = KeyStore::new(3);
        let key = keys.key("speed-1");
        for forge in [true, false] {
            let s = script(AttackKind::Scale { factor: 1.5, forge });
            let mut n = net(&s, &keys);
            let before = n.transmit("speed-1", 999, sample(999, 1, &keys)).unwrap();
            assert_eq!(before[0].value, 1.0);
            let out = n.transmit("speed-1", 1000, sample(1000, 2, &keys)).unwrap();
            assert_eq!(out[0].value, 1.5);
            assert_eq!(
                verify_tag(&key, &out[0].tag_input(), &out[0].auth_tag),
                forge
            );
            let after = n.transmit("speed-1", 2000, sample(2000, 3, &keys)).unwrap();
            assert_eq!(after[0].value, 1.0);
        }
    }

    #[test]
    fn replay_substitutes_capture() {
        let keys = KeyStore::new(3);
        let s = script(AttackKind::Replay {
            capture_start_ms: 0,
            capture_end_ms: 300,
        });
        let mut n = net(&s, &keys);
        for i in 0..10 {
            n.transmit("speed-1", i * 100, sample(i * 100, i + 1, &keys))
                .unwrap();
        }
        let got: Vec<u64> = (0..4)
            .map(|i| {
                n.transmit(
                    "speed-1",
                    1000 + i * 100,
                    sample(1000 + i * 100, 11 + i, &keys),
                )
                .unwrap()[0]
                    .seq
            })
            .collect();
        assert_eq!(got, vec![1, 2, 3, 1]);
    }

    #[test]
    fn spoof_adds_unregistered_sample() {
        let keys = KeyStore::new(3);
        let s = script(AttackKind::Spoof {
            source: "rogue-7".into(),
            value: 0.4,
            quantity: None,
            unit: None,
        });
        let mut n = net(&s, &keys);
        let out = n.transmit("speed-1", 1500, sample(1500, 1, &keys)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].source.as_str(), "rogue-7");
        assert_eq!(
            (out[1].quantity, out[1].ts, out[1].seq),
            (Quantity::Speed, 1500, 1)
        );
        assert!(net(&script(AttackKind::Drop), &keys)
            .transmit("speed-1", 1500, sample(1500, 1, &keys))
            .unwrap()
            .is_empty());
    }
}
