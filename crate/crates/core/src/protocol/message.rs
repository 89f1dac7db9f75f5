//! Peer-to-peer wire vocabulary and its JSON encoding.
//!
//! One compact JSON object per frame, `"type"` first, remaining keys in
//! declaration order. The encoding is deterministic so it can be pinned by
//! golden tests.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::energy::{EnergyAmount, Role};
use crate::sim::EndReason;

const TYPES: [&str; 8] = [
    "ROLE_ANNOUNCE",
    "ENERGY_REQUEST",
    "ACCEPT",
    "REJECT",
    "TRANSFER_START",
    "HEARTBEAT",
    "TRANSFER_COMPLETE",
    "ABORT",
];

/// What an `ABORT` refers to: a registered transaction, or a request that
/// never got that far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortTarget {
    TransactionId(String),
    RequestId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProtocolMessage {
    RoleAnnounce {
        device_id: String,
        role: Role,
        amount: EnergyAmount,
        capacity_mwh: f64,
    },
    EnergyRequest {
        request_id: String,
        amount: EnergyAmount,
    },
    Accept {
        request_id: String,
    },
    Reject {
        request_id: String,
        reason: String,
    },
    TransferStart {
        transaction_id: String,
        start_time_s: f64,
    },
    Heartbeat {
        t_s: f64,
    },
    TransferComplete {
        transaction_id: String,
        end_reason: EndReason,
    },
    Abort {
        #[serde(flatten)]
        target: AbortTarget,
        reason: String,
    },
}

impl ProtocolMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ProtocolMessage::RoleAnnounce { .. } => TYPES[0],
            ProtocolMessage::EnergyRequest { .. } => TYPES[1],
            ProtocolMessage::Accept { .. } => TYPES[2],
            ProtocolMessage::Reject { .. } => TYPES[3],
            ProtocolMessage::TransferStart { .. } => TYPES[4],
            ProtocolMessage::Heartbeat { .. } => TYPES[5],
            ProtocolMessage::TransferComplete { .. } => TYPES[6],
            ProtocolMessage::Abort { .. } => TYPES[7],
        }
    }

    /// The transaction this message is bound to, if it carries one.
    pub fn transaction_id(&self) -> Option<&str> {
        match self {
            ProtocolMessage::TransferStart { transaction_id, .. }
            | ProtocolMessage::TransferComplete { transaction_id, .. }
            | ProtocolMessage::Abort {
                target: AbortTarget::TransactionId(transaction_id),
                ..
            } => Some(transaction_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
}

pub fn encode_message(msg: &ProtocolMessage) -> Vec<u8> {
    // Serializing plain data with string keys cannot fail.
    serde_json::to_vec(msg).expect("protocol message serializes")
}

pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DecodeError::Malformed("expected a JSON object".into()))?;
    let ty = match obj.get("type") {
        None => return Err(DecodeError::MissingField("type".into())),
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(DecodeError::InvalidField("`type` must be a string".into())),
    };
    if !TYPES.contains(&ty) {
        return Err(DecodeError::UnknownType(ty.to_string()));
    }
    if ty == "ABORT" && !(obj.contains_key("transaction_id") ^ obj.contains_key("request_id")) {
        return Err(DecodeError::InvalidField(
            "ABORT needs exactly one of `transaction_id` or `request_id`".into(),
        ));
    }
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        match msg
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            Some(field) => DecodeError::MissingField(field.to_string()),
            None => DecodeError::InvalidField(msg),
        }
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn amt(p: i64) -> EnergyAmount {
        EnergyAmount::new(p).unwrap()
    }

    fn golden() -> Vec<(ProtocolMessage, &'static str)> {
        vec![
            (
                ProtocolMessage::RoleAnnounce {
                    device_id: "pixel-a".into(),
                    role: Role::Provider,
                    amount: amt(10),
                    capacity_mwh: 15400.0,
                },
                r#"{"type":"ROLE_ANNOUNCE","device_id":"pixel-a","role":"provider","amount":10,"capacity_mwh":15400.0}"#,
            ),
            (
                ProtocolMessage::EnergyRequest {
                    request_id: "r1".into(),
                    amount: amt(10),
                },
                r#"{"type":"ENERGY_REQUEST","request_id":"r1","amount":10}"#,
            ),
            (
                ProtocolMessage::Accept { request_id: "r1".into() },
                r#"{"type":"ACCEPT","request_id":"r1"}"#,
            ),
            (
                ProtocolMessage::Reject {
                    request_id: "r2".into(),
                    reason: "busy".into(),
                },
                r#"{"type":"REJECT","request_id":"r2","reason":"busy"}"#,
            ),
            (
                ProtocolMessage::TransferStart {
                    transaction_id: "9f0c".into(),
                    start_time_s: 0.04,
                },
                r#"{"type":"TRANSFER_START","transaction_id":"9f0c","start_time_s":0.04}"#,
            ),
            (
                ProtocolMessage::Heartbeat { t_s: 5.0 },
                r#"{"type":"HEARTBEAT","t_s":5.0}"#,
            ),
            (
                ProtocolMessage::TransferComplete {
                    transaction_id: "9f0c".into(),
                    end_reason: EndReason::ProviderCap,
                },
                r#"{"type":"TRANSFER_COMPLETE","transaction_id":"9f0c","end_reason":"provider_cap"}"#,
            ),
            (
                ProtocolMessage::Abort {
                    target: AbortTarget::TransactionId("9f0c".into()),
                    reason: "link-down".into(),
                },
                r#"{"type":"ABORT","transaction_id":"9f0c","reason":"link-down"}"#,
            ),
            (
                ProtocolMessage::Abort {
                    target: AbortTarget::RequestId("r1".into()),
                    reason: "timeout".into(),
                },
                r#"{"type":"ABORT","request_id":"r1","reason":"timeout"}"#,
            ),
        ]
    }

    #[test]
    fn golden_encodings() {
        for (msg, text) in golden() {
            assert_eq!(String::from_utf8(encode_message(&msg)).unwrap(), text);
            assert_eq!(decode_message(text.as_bytes()).unwrap(), msg);
        }
    }

    #[test]
    fn decode_errors() {
        assert_eq!(
            decode_message(br#"{"type":"FOO"}"#),
            Err(DecodeError::UnknownType("FOO".into()))
        );
        assert!(matches!(
            decode_message(br#"{"type":"ACCEPT","request"#),
            Err(DecodeError::Malformed(_))
        ));
        assert_eq!(
            decode_message(br#"{"type":"ACCEPT"}"#),
            Err(DecodeError::MissingField("request_id".into()))
        );
        assert_eq!(
            decode_message(br#"{"request_id":"r1"}"#),
            Err(DecodeError::MissingField("type".into()))
        );
        assert!(matches!(
            decode_message(br#"{"type":"ENERGY_REQUEST","request_id":"r","amount":0}"#),
            Err(DecodeError::InvalidField(_))
        ));
        assert!(matches!(
            decode_message(br#"{"type":"ABORT","reason":"x"}"#),
            Err(DecodeError::InvalidField(_))
        ));
        assert!(matches!(decode_message(b"[1,2]"), Err(DecodeError::Malformed(_))));
    }

    fn arb_id() -> impl Strategy<Value = String> {
        "[a-z0-9\\-\"\\\\ é]{0,12}"
    }

    fn arb_reason() -> impl Strategy<Value = EndReason> {
        prop_oneof![
            Just(EndReason::ConsumerTarget),
            Just(EndReason::ProviderCap),
            Just(EndReason::ProviderFloor),
            Just(EndReason::ConsumerFull),
            Just(EndReason::DurationElapsed),
            Just(EndReason::Aborted),
        ]
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = ProtocolMessage> {
        let f = -1e9f64..1e9;
        prop_oneof![
            (arb_id(), any::<bool>(), 1i64..=100, f.clone()).prop_map(|(d, p, a, c)| {
                ProtocolMessage::RoleAnnounce {
                    device_id: d,
                    role: if p { Role::Provider } else { Role::Consumer },
                    amount: amt(a),
                    capacity_mwh: c,
                }
            }),
            (arb_id(), 1i64..=100).prop_map(|(r, a)| ProtocolMessage::EnergyRequest {
                request_id: r,
                amount: amt(a)
            }),
            arb_id().prop_map(|r| ProtocolMessage::Accept { request_id: r }),
            (arb_id(), arb_id()).prop_map(|(r, why)| ProtocolMessage::Reject {
                request_id: r,
                reason: why
            }),
            (arb_id(), f.clone()).prop_map(|(t, s)| ProtocolMessage::TransferStart {
                transaction_id: t,
                start_time_s: s
            }),
            f.prop_map(|t| ProtocolMessage::Heartbeat { t_s: t }),
            (arb_id(), arb_reason()).prop_map(|(t, r)| ProtocolMessage::TransferComplete {
                transaction_id: t,
                end_reason: r
            }),
            (arb_id(), any::<bool>(), arb_id()).prop_map(|(id, tx, why)| ProtocolMessage::Abort {
                target: if tx {
                    AbortTarget::TransactionId(id)
                } else {
                    AbortTarget::RequestId(id)
                },
                reason: why,
            }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let bytes = encode_message(&msg);
            prop_assert!(std::str::from_utf8(&bytes).is_ok());
            prop_assert_eq!(decode_message(&bytes).unwrap(), msg.clone());
            // deterministic
            prop_assert_eq!(encode_message(&msg), bytes);
        }
    }
}
