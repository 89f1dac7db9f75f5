//! Session protocol: wire messages and the consumer/provider state machines.

pub mod machine;
pub mod message;

pub use machine::{
    consumer_handle, provider_handle, Action, ConsumerState, Event, LocalCommand, LocalInfo,
    ProviderState, RegistrationRequest, TimerId,
};
pub use message::{decode_message, encode_message, AbortTarget, DecodeError, ProtocolMessage};
