//! Symmetric primitives used by the ORAM block layer and the record partitioner.
//!
//! Blocks are sealed with AES-GCM under a fresh 128-bit IV, so two encryptions
//! of the same plaintext never share an IV (with overwhelming probability) and
//! decryption under the wrong key is rejected instead of yielding garbage.
//! The serialized layout is `iv ‖ body ‖ tag`.

use aes_gcm::aead::consts::U16;
use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::aes::{Aes128, Aes256};
use aes_gcm::AesGcm;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use thiserror::Error;

/// Seeded pseudo-random generator used for every random draw in the crate.
pub type Prg = ChaCha20Rng;

pub const IV_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
pub const PRF_LEN: usize = 32;

type Aes128Gcm16 = AesGcm<Aes128, U16>;
type Aes256Gcm16 = AesGcm<Aes256, U16>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported key size: {0} bits (expected 128 or 256)")]
    UnsupportedKeySize(u32),
    #[error("plaintext of {len} bytes exceeds block payload of {max} bytes")]
    PlaintextTooLarge { len: usize, max: usize },
    #[error("malformed ciphertext of {0} bytes")]
    Malformed(usize),
    #[error("ciphertext failed authentication")]
    Authentication,
}

/// Build a generator from OS entropy (production default).
pub fn prg_from_entropy() -> Prg {
    Prg::from_entropy()
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymKey {
    bytes: Vec<u8>,
}

impl std::fmt::Debug for SymKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SymKey({} bits)", self.bits())
    }
}

impl SymKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        match bytes.len() {
            16 | 32 => Ok(Self {
                bytes: bytes.to_vec(),
            }),
            n => Err(CryptoError::UnsupportedKeySize((n * 8) as u32)),
        }
    }

    pub fn bits(&self) -> u32 {
        (self.bytes.len() * 8) as u32
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Draw a uniformly random key of `bits` bits from `rng`.
pub fn keygen<R: RngCore + CryptoRng>(bits: u32, rng: &mut R) -> Result<SymKey, CryptoError> {
    if bits != 128 && bits != 256 {
        return Err(CryptoError::UnsupportedKeySize(bits));
    }
    let mut bytes = vec![0u8; bits as usize / 8];
    rng.fill_bytes(&mut bytes);
    Ok(SymKey { bytes })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub iv: [u8; IV_LEN],
    /// Encrypted bytes followed by the authentication tag.
    pub body: Vec<u8>,
}

impl Ciphertext {
    pub fn len(&self) -> usize {
        IV_LEN + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < IV_LEN + TAG_LEN {
            return Err(CryptoError::Malformed(bytes.len()));
        }
        let mut iv = [0u8; IV_LEN];
        iv.copy_from_slice(&bytes[..IV_LEN]);
        Ok(Self {
            iv,
            body: bytes[IV_LEN..].to_vec(),
        })
    }
}

#[derive(Clone)]
enum Aead {
    Aes128(Box<Aes128Gcm16>),
    Aes256(Box<Aes256Gcm16>),
}

/// Keyed encryption context for blocks of at most `max_plaintext` bytes.
#[derive(Clone)]
pub struct BlockCipher {
    aead: Aead,
    max_plaintext: usize,
}

impl BlockCipher {
    pub fn new(key: &SymKey, max_plaintext: usize) -> Self {
        let aead = match key.bits() {
            128 => Aead::Aes128(Box::new(
                Aes128Gcm16::new_from_slice(key.as_bytes()).expect("128-bit key"),
            )),
            _ => Aead::Aes256(Box::new(
                Aes256Gcm16::new_from_slice(key.as_bytes()).expect("256-bit key"),
            )),
        };
        Self {
            aead,
            max_plaintext,
        }
    }

    pub fn max_plaintext(&self) -> usize {
        self.max_plaintext
    }

    /// Serialized ciphertext size for a plaintext of `plaintext_len` bytes.
    pub fn ciphertext_len(plaintext_len: usize) -> usize {
        IV_LEN + plaintext_len + TAG_LEN
    }

    pub fn encrypt_block<R: RngCore + CryptoRng>(
        &self,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        if plaintext.len() > self.max_plaintext {
            return Err(CryptoError::PlaintextTooLarge {
                len: plaintext.len(),
                max: self.max_plaintext,
            });
        }
        let mut iv = [0u8; IV_LEN];
        rng.fill_bytes(&mut iv);
        let mut body = plaintext.to_vec();
        let nonce = aes_gcm::Nonce::<U16>::from_slice(&iv);
        let res = match &self.aead {
            Aead::Aes128(c) => c.encrypt_in_place(nonce, b"", &mut body),
            Aead::Aes256(c) => c.encrypt_in_place(nonce, b"", &mut body),
        };
        // encrypt_in_place only fails on buffer growth errors, impossible for Vec
        res.expect("in-memory encryption");
        Ok(Ciphertext { iv, body })
    }

    pub fn decrypt_block(&self, c: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
        if c.body.len() < TAG_LEN {
            return Err(CryptoError::Malformed(c.len()));
        }
        let nonce = aes_gcm::Nonce::<U16>::from_slice(&c.iv);
        let mut body = c.body.clone();
        let res = match &self.aead {
            Aead::Aes128(a) => a.decrypt_in_place(nonce, b"", &mut body),
            Aead::Aes256(a) => a.decrypt_in_place(nonce, b"", &mut body),
        };
        res.map_err(|_| CryptoError::Authentication)?;
        Ok(body)
    }

    /// Decrypt directly from the serialized `iv ‖ body ‖ tag` form.
    pub fn decrypt_bytes(&self, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
        self.decrypt_block(&Ciphertext::from_bytes(bytes)?)
    }
}

/// HMAC-SHA256 keyed pseudo-random function.
pub fn prf(key: &SymKey, input: &[u8]) -> [u8; PRF_LEN] {
    let mut mac =
        <Hmac<Sha256> as Mac>::new_from_slice(key.as_bytes()).expect("hmac accepts any key");
    mac.update(input);
    mac.finalize().into_bytes().into()
}

/// Map `input` into `[0, buckets)` through the PRF.
pub fn prf_bucket(key: &SymKey, input: &[u8], buckets: u64) -> u64 {
    let out = prf(key, input);
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_be_bytes(word) % buckets
}
