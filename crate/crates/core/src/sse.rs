//! Single-reader keyword-searchable encrypted storage.
//!
//! An edge lookup table maps PRF tokens of keyword bins to record ids; a
//! cloud store keeps each record as a ChaCha20-Poly1305 ciphertext with the
//! record id bound as associated data.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chacha20poly1305::aead::{Aead, AeadCore, KeyInit, OsRng, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::codec::{Reader, Writer};
use crate::dataset::{KeywordBin, SensorRecord};
use crate::error::{Error, Result};

pub const MIN_MASTER_SECRET: usize = 16;
pub const TOKEN_BYTES: usize = 16;
pub const TABLE_HEADER_BYTES: usize = 16;
pub const TABLE_ENTRY_BYTES: usize = TOKEN_BYTES + 4;
pub const RECORD_PLAINTEXT_BYTES: usize = 5 * 8 + 1;
pub const NONCE_BYTES: usize = 12;
pub const TAG_BYTES: usize = 16;
pub const CIPHERTEXT_BYTES: usize = NONCE_BYTES + RECORD_PLAINTEXT_BYTES + TAG_BYTES;

const KDF_SALT: &[u8] = b"mini-elsa/v1";
const TABLE_MAGIC: &[u8; 8] = b"MELSALKT";
const STORE_MAGIC: &[u8; 8] = b"MELSACST";
const FORMAT_VERSION: u32 = 1;
const TABLE_FILE: &str = "lookup.tbl";
const STORE_FILE: &str = "cloud.bin";

#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    prf_key: [u8; 32],
    enc_key: [u8; 32],
}

impl KeyMaterial {
    pub fn prf_key(&self) -> &[u8; 32] {
        &self.prf_key
    }

    pub fn enc_key(&self) -> &[u8; 32] {
        &self.enc_key
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

/// HKDF-SHA256 derivation of the token and encryption keys.
pub fn keygen(master_secret: &[u8]) -> Result<KeyMaterial> {
    if master_secret.len() < MIN_MASTER_SECRET {
        return Err(Error::arg(format!(
            "master secret must be at least {MIN_MASTER_SECRET} bytes, got {}",
            master_secret.len()
        )));
    }
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), master_secret);
    let mut keys = KeyMaterial {
        prf_key: [0; 32],
        enc_key: [0; 32],
    };
    hk.expand(b"prf", &mut keys.prf_key).expect("32 bytes is a valid HKDF length");
    hk.expand(b"enc", &mut keys.enc_key).expect("32 bytes is a valid HKDF length");
    Ok(keys)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SearchToken([u8; TOKEN_BYTES]);

impl SearchToken {
    pub fn from_bytes(bytes: [u8; TOKEN_BYTES]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; TOKEN_BYTES] {
        &self.0
    }
}

impl fmt::Debug for SearchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Truncated HMAC-SHA256 of the keyword.
pub fn trapdoor(keys: &KeyMaterial, keyword: &str) -> SearchToken {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&keys.prf_key).expect("HMAC takes any key length");
    mac.update(keyword.as_bytes());
    let digest = mac.finalize().into_bytes();
    let mut out = [0; TOKEN_BYTES];
    out.copy_from_slice(&digest[..TOKEN_BYTES]);
    SearchToken(out)
}

fn encode_record(r: &SensorRecord) -> Result<[u8; RECORD_PLAINTEXT_BYTES]> {
    let mut out = [0; RECORD_PLAINTEXT_BYTES];
    for (chunk, v) in out.chunks_exact_mut(8).zip([r.at, r.v, r.ap, r.rh, r.pe]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    out[40] = r.bin()?.code();
    Ok(out)
}

fn decode_record(id: u32, bytes: &[u8]) -> Result<SensorRecord> {
    if bytes.len() != RECORD_PLAINTEXT_BYTES {
        return Err(Error::format("record plaintext has the wrong length"));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let r = SensorRecord::new(id, f(0), f(1), f(2), f(3), f(4))?;
    match KeywordBin::from_code(bytes[40]) {
        Some(bin) if bin == r.bin()? => Ok(r),
        _ => Err(Error::format("stored bin code does not match the record")),
    }
}

fn cipher(keys: &KeyMaterial) -> ChaCha20Poly1305 {
    ChaCha20Poly1305::new(Key::from_slice(&keys.enc_key))
}

/// `nonce || ciphertext || tag`, with the record id as associated data.
pub fn encrypt_record(keys: &KeyMaterial, r: &SensorRecord) -> Result<Vec<u8>> {
    let plain = encode_record(r)?;
    let nonce = ChaCha20Poly1305::generate_nonce(&mut OsRng);
    let aad = r.id.to_le_bytes();
    let sealed = cipher(keys)
        .encrypt(&nonce, Payload { msg: &plain, aad: &aad })
        .map_err(|_| Error::Authentication)?;
    let mut out = Vec::with_capacity(CIPHERTEXT_BYTES);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    Ok(out)
}

pub fn decrypt_record(keys: &KeyMaterial, id: u32, blob: &[u8]) -> Result<SensorRecord> {
    if blob.len() != CIPHERTEXT_BYTES {
        return Err(Error::Authentication);
    }
    let (nonce, sealed) = blob.split_at(NONCE_BYTES);
    let aad = id.to_le_bytes();
    let plain = cipher(keys)
        .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: &aad })
        .map_err(|_| Error::Authentication)?;
    decode_record(id, &plain)
}

/// Flat `(token, id)` entries in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeLookupTable {
    entries: Vec<(SearchToken, u32)>,
}

impl EdgeLookupTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(SearchToken, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, token: SearchToken, id: u32) {
        self.entries.push((token, id));
    }

    /// Ids stored under `token`, by linear scan.
    pub fn search(&self, token: &SearchToken) -> Vec<u32> {
        self.entries
            .iter()
            .filter(|(t, _)| t == token)
            .map(|&(_, id)| id)
            .collect()
    }

    pub fn remove(&mut self, id: u32) -> bool {
        let before = self.entries.len();
        self.entries.retain(|&(_, i)| i != id);
        self.entries.len() != before
    }

    pub fn size_bytes(&self) -> usize {
        TABLE_HEADER_BYTES + TABLE_ENTRY_BYTES * self.entries.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(TABLE_MAGIC, FORMAT_VERSION);
        w.len_u32(self.entries.len());
        for (token, id) in &self.entries {
            w.bytes(&token.0);
            w.u32(*id);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, TABLE_MAGIC, FORMAT_VERSION)?;
        let n = r.u32()? as usize;
        if bytes.len() != TABLE_HEADER_BYTES + TABLE_ENTRY_BYTES * n {
            return Err(Error::format(format!("lookup table length does not match {n} entries")));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let token = SearchToken(r.take(TOKEN_BYTES)?.try_into().unwrap());
            entries.push((token, r.u32()?));
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

/// Ciphertexts by record id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CloudStore {
    blobs: HashMap<u32, Vec<u8>>,
}

impl CloudStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.blobs.contains_key(&id)
    }

    pub fn get(&self, id: u32) -> Option<&[u8]> {
        self.blobs.get(&id).map(Vec::as_slice)
    }

    pub fn put(&mut self, id: u32, blob: Vec<u8>) -> Result<()> {
        if self.blobs.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.blobs.insert(id, blob);
        Ok(())
    }

    pub fn remove(&mut self, id: u32) -> Option<Vec<u8>> {
        self.blobs.remove(&id)
    }

    /// Total ciphertext bytes.
    pub fn size_bytes(&self) -> usize {
        self.blobs.values().map(Vec::len).sum()
    }

    /// Entries sorted by id, each `id || blob length || blob`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut ids: Vec<u32> = self.blobs.keys().copied().collect();
        ids.sort_unstable();
        let mut w = Writer::with_header(STORE_MAGIC, FORMAT_VERSION);
        w.len_u32(ids.len());
        for id in ids {
            let blob = &self.blobs[&id];
            w.u32(id);
            w.len_u32(blob.len());
            w.bytes(blob);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, STORE_MAGIC, FORMAT_VERSION)?;
        let n = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let id = r.u32()?;
            let len = r.u32()? as usize;
            store
                .put(id, r.take(len)?.to_vec())
                .map_err(|_| Error::format(format!("duplicate id {id} in store file")))?;
        }
        r.finish()?;
        Ok(store)
    }
}

/// Lookup table and cloud store under one key.
#[derive(Debug, Clone)]
pub struct SearchableStore {
    keys: KeyMaterial,
    tokens: HashMap<KeywordBin, SearchToken>,
    table: EdgeLookupTable,
    store: CloudStore,
}

impl SearchableStore {
    pub fn new(keys: KeyMaterial) -> Self {
        let tokens = KeywordBin::ALL
            .iter()
            .map(|&b| (b, trapdoor(&keys, b.as_str())))
            .collect();
        Self {
            keys,
            tokens,
            table: EdgeLookupTable::new(),
            store: CloudStore::new(),
        }
    }

    pub fn keys(&self) -> &KeyMaterial {
        &self.keys
    }

    pub fn table(&self) -> &EdgeLookupTable {
        &self.table
    }

    pub fn cloud(&self) -> &CloudStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> Vec<u32> {
        self.table.entries.iter().map(|&(_, id)| id).collect()
    }

    pub fn trapdoor(&self, keyword: &str) -> SearchToken {
        trapdoor(&self.keys, keyword)
    }

    /// Encrypts and indexes one record; the store is unchanged on error.
    pub fn insert(&mut self, r: &SensorRecord) -> Result<()> {
        if self.store.contains(r.id) {
            return Err(Error::DuplicateId(r.id));
        }
        let token = self.tokens[&r.bin()?];
        let blob = encrypt_record(&self.keys, r)?;
        self.store.put(r.id, blob)?;
        self.table.push(token, r.id);
        Ok(())
    }

    pub fn search(&self, token: &SearchToken) -> Vec<u32> {
        self.table.search(token)
    }

    pub fn search_keyword(&self, keyword: &str) -> Vec<u32> {
        self.search(&self.trapdoor(keyword))
    }

    /// Decrypted records in request order.
    pub fn fetch_and_decrypt(&self, ids: &[u32]) -> Result<Vec<SensorRecord>> {
        ids.iter()
            .map(|&id| {
                let blob = self.store.get(id).ok_or(Error::NotFound(id))?;
                decrypt_record(&self.keys, id, blob)
            })
            .collect()
    }

    pub fn evict(&mut self, id: u32) -> Result<()> {
        if self.store.remove(id).is_none() {
            return Err(Error::NotFound(id));
        }
        self.table.remove(id);
        Ok(())
    }

    pub fn table_size_bytes(&self) -> usize {
        self.table.size_bytes()
    }

    pub fn store_size_bytes(&self) -> usize {
        self.store.size_bytes()
    }

    /// Writes the lookup table and cloud store files into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TABLE_FILE), self.table.to_bytes())?;
        fs::write(dir.join(STORE_FILE), self.store.to_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, keys: KeyMaterial) -> Result<Self> {
        let dir = dir.as_ref();
        let table = EdgeLookupTable::from_bytes(&fs::read(dir.join(TABLE_FILE))?)?;
        let store = CloudStore::from_bytes(&fs::read(dir.join(STORE_FILE))?)?;
        if table.len() != store.len() || table.entries.iter().any(|&(_, id)| !store.contains(id)) {
            return Err(Error::format("lookup table and cloud store disagree"));
        }
        let mut s = Self::new(keys);
        s.table = table;
        s.store = store;
        Ok(s)
    }
}

/// One writer, many readers over a [`SearchableStore`].
#[derive(Debug, Clone)]
pub struct SharedStore(Arc<RwLock<SearchableStore>>);

impl SharedStore {
    pub fn new(store: SearchableStore) -> Self {
        Self(Arc::new(RwLock::new(store)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, SearchableStore> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, SearchableStore> {
        self.0.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert(&self, r: &SensorRecord) -> Result<()> {
        self.write().insert(r)
    }

    pub fn search(&self, token: &SearchToken) -> Vec<u32> {
        self.read().search(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bin_power, synth_ccpp};

    fn keys() -> KeyMaterial {
        keygen(b"0123456789abcdef").unwrap()
    }

    fn rec(id: u32, pe: f64) -> SensorRecord {
        SensorRecord::new(id, 20.0, 50.0, 1010.0, 70.0, pe).unwrap()
    }

    #[test]
    fn key_derivation() {
        assert_eq!(keys(), keys());
        let k = keys();
        assert_ne!(k.prf_key(), k.enc_key());
        assert_ne!(keygen(b"0123456789abcdeF").unwrap(), k);
        assert!(matches!(keygen(b"12345678"), Err(Error::InvalidArgument(_))));
        assert_eq!(format!("{k:?}"), "KeyMaterial(..)");
    }

    #[test]
    fn tokens() {
        let k = keys();
        assert_eq!(trapdoor(&k, "low"), trapdoor(&k, "low"));
        let all: std::collections::HashSet<_> = KeywordBin::ALL.iter().map(|b| trapdoor(&k, b.as_str())).collect();
        assert_eq!(all.len(), 4);
        let other = keygen(b"another master secret").unwrap();
        assert_ne!(trapdoor(&k, "low"), trapdoor(&other, "low"));
        assert_eq!(format!("{:?}", trapdoor(&k, "low")).len(), 32);
    }

    #[test]
    fn record_round_trip_and_tamper() {
        let k = keys();
        let r = rec(7, 481.25);
        let blob = encrypt_record(&k, &r).unwrap();
        assert_eq!(blob.len(), CIPHERTEXT_BYTES);
        assert_eq!(CIPHERTEXT_BYTES, 69);
        assert_eq!(decrypt_record(&k, 7, &blob).unwrap(), r);
        for bit in [0, 100, 8 * blob.len() - 1] {
            let mut bad = blob.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(matches!(decrypt_record(&k, 7, &bad), Err(Error::Authentication)));
        }
        assert!(matches!(decrypt_record(&k, 8, &blob), Err(Error::Authentication)));
        let wrong = keygen(b"fedcba9876543210").unwrap();
        assert!(matches!(decrypt_record(&wrong, 7, &blob), Err(Error::Authentication)));
        assert!(matches!(decrypt_record(&k, 7, &blob[1..]), Err(Error::Authentication)));
        // fresh nonce per encryption
        assert_ne!(encrypt_record(&k, &r).unwrap(), blob);
    }

    #[test]
    fn search_matches_plaintext_bins() {
        let mut s = SearchableStore::new(keys());
        for (id, pe) in [(1, 430.0), (2, 470.0), (3, 435.0), (4, 475.0), (5, 438.9)] {
            s.insert(&rec(id, pe)).unwrap();
        }
        assert_eq!(s.search_keyword("low"), vec![1, 3, 5]);
        assert_eq!(s.search_keyword("high"), vec![2, 4]);
        assert!(s.search_keyword("severe").is_empty());
        assert!(s.search_keyword("medium").is_empty());
        assert!(matches!(s.insert(&rec(3, 480.0)), Err(Error::DuplicateId(3))));
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn oracle_on_synthetic_records() {
        let d = synth_ccpp(400, 3).unwrap();
        let mut s = SearchableStore::new(keys());
        for r in d.records() {
            s.insert(r).unwrap();
        }
        let mut seen = Vec::new();
        for bin in KeywordBin::ALL {
            let ids = s.search_keyword(bin.as_str());
            let expected: Vec<u32> = d.records().iter().filter(|r| r.bin().unwrap() == bin).map(|r| r.id).collect();
            assert_eq!(ids, expected);
            let fetched = s.fetch_and_decrypt(&ids).unwrap();
            assert!(fetched.iter().all(|r| bin_power(r.pe).unwrap() == bin));
            seen.extend(ids);
        }
        seen.sort_unstable();
        assert_eq!(seen, d.ids());
        assert_eq!(s.table_size_bytes(), 16 + 20 * 400);
        assert_eq!(s.table().to_bytes().len(), s.table_size_bytes());
        assert_eq!(s.store_size_bytes(), 69 * 400);
    }

    #[test]
    fn fetch_and_evict() {
        let mut s = SearchableStore::new(keys());
        assert!(s.fetch_and_decrypt(&[]).unwrap().is_empty());
        assert_eq!(s.table_size_bytes(), 16);
        assert_eq!(s.table().to_bytes().len(), 16);
        s.insert(&rec(1, 490.0)).unwrap();
        s.insert(&rec(2, 450.0)).unwrap();
        let got = s.fetch_and_decrypt(&[2, 1]).unwrap();
        assert_eq!(got.iter().map(|r| r.id).collect::<Vec<_>>(), vec![2, 1]);
        s.evict(1).unwrap();
        assert!(matches!(s.fetch_and_decrypt(&[1]), Err(Error::NotFound(1))));
        assert!(s.search_keyword("severe").is_empty());
        assert!(matches!(s.evict(1), Err(Error::NotFound(1))));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn table_hides_keywords() {
        let mut s = SearchableStore::new(keys());
        for (id, pe) in [(1, 430.0), (2, 450.0), (3, 470.0), (4, 490.0)] {
            s.insert(&rec(id, pe)).unwrap();
        }
        let bytes = s.table().to_bytes();
        for w in ["low", "normal", "high", "severe"] {
            assert!(!bytes.windows(w.len()).any(|x| x == w.as_bytes()));
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SearchableStore::new(keys());
        for (id, pe) in [(10, 430.0), (11, 450.0), (12, 490.0)] {
            s.insert(&rec(id, pe)).unwrap();
        }
        s.save(dir.path()).unwrap();
        let back = SearchableStore::load(dir.path(), keys()).unwrap();
        assert_eq!(back.table(), s.table());
        assert_eq!(back.cloud(), s.cloud());
        assert_eq!(back.fetch_and_decrypt(&[12]).unwrap()[0].pe, 490.0);

        let table = s.table().to_bytes();
        assert!(EdgeLookupTable::from_bytes(&table[..table.len() - 1]).is_err());
        let mut bad = table.clone();
        bad[9] = 9;
        assert!(EdgeLookupTable::from_bytes(&bad).is_err());
        let store = s.cloud().to_bytes();
        assert_eq!(CloudStore::from_bytes(&store).unwrap(), *s.cloud());
        assert!(CloudStore::from_bytes(&store[..store.len() - 1]).is_err());
    }

    #[test]
    fn shared_readers_see_whole_entries() {
        let shared = SharedStore::new(SearchableStore::new(keys()));
        let token = shared.read().trapdoor("low");
        let writer = {
            let s = shared.clone();
            std::thread::spawn(move || {
                for id in 0..200 {
                    s.insert(&rec(id, 430.0)).unwrap();
                }
            })
        };
        let mut last = 0;
        while last < 200 {
            let ids = shared.search(&token);
            assert!(ids.len() >= last);
            assert!(ids.iter().enumerate().all(|(i, &id)| id == i as u32));
            last = ids.len();
            std::thread::yield_now();
        }
        writer.join().unwrap();
    }
}
