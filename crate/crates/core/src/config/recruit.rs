//! Condition assignment, completion codes and join tokens.

use data_encoding::BASE32_NOPAD;
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

use super::ExperimentDef;
use crate::rng::CounterRng;

type HmacSha256 = Hmac<Sha256>;

pub const COMPLETION_CODE_LEN: usize = 12;
const TOKEN_MAC_LEN: usize = 16;
const FIELD_SEP: u8 = 0x1f;

fn mac(secret: &str, parts: &[&[u8]]) -> Vec<u8> {
    let mut m = HmacSha256::new_from_slice(secret.as_bytes()).expect("HMAC accepts any key length");
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            m.update(&[FIELD_SEP]);
        }
        m.update(p);
    }
    m.finalize().into_bytes().to_vec()
}

/// Balanced, order-independent assignment: a keyed hash of
/// `(assignment_seed, participant_id)` modulo the number of conditions, over
/// condition names in lexicographic order. `None` when there are no
/// conditions.
pub fn assign_condition(def: &ExperimentDef, participant_id: &str, assignment_seed: u64) -> Option<String> {
    let names: Vec<&String> = def.conditions.keys().collect();
    if names.is_empty() {
        return None;
    }
    let mut h = Sha256::new();
    h.update(assignment_seed.to_le_bytes());
    h.update(participant_id.as_bytes());
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    Some(names[(x % names.len() as u64) as usize].clone())
}

/// HMAC-SHA256 over `study_id || participant_id`, base32, first 12 chars.
pub fn mint_completion_code(study_id: &str, participant_id: &str, secret: &str) -> String {
    let tag = mac(secret, &[study_id.as_bytes(), participant_id.as_bytes()]);
    let mut code = BASE32_NOPAD.encode(&tag);
    code.truncate(COMPLETION_CODE_LEN);
    code
}

pub fn verify_completion_code(code: &str, study_id: &str, participant_id: &str, secret: &str) -> bool {
    let expected = mint_completion_code(study_id, participant_id, secret);
    code.len() == expected.len() && code.bytes().zip(expected.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

/// Opaque, self-verifying participant token `nonce.mac` bound to a session.
/// It carries no participant data.
pub fn mint_join_token(secret: &str, session_id: &str, rng: &mut CounterRng) -> String {
    let nonce = BASE32_NOPAD.encode(&rng.next_u64().to_le_bytes());
    let tag = BASE32_NOPAD.encode(&mac(secret, &[b"join", session_id.as_bytes(), nonce.as_bytes()]));
    format!("{nonce}.{}", &tag[..TOKEN_MAC_LEN])
}

pub fn verify_join_token(secret: &str, session_id: &str, token: &str) -> bool {
    let Some((nonce, tag)) = token.split_once('.') else {
        return false;
    };
    let expected = BASE32_NOPAD.encode(&mac(secret, &[b"join", session_id.as_bytes(), nonce.as_bytes()]));
    tag.len() == TOKEN_MAC_LEN && tag.as_bytes() == &expected.as_bytes()[..TOKEN_MAC_LEN]
}
