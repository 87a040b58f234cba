//! The programs under attack: a secret-indexed toy load and T-table AES-128.

mod aes;
mod toy;

pub use aes::{
    aes_decrypt, aes_encrypt, decrypt_block, decrypt_plan, decrypt_traced, encrypt_block,
    AesKeySchedule, AesTables, DecryptIo, DecryptTrace, COMBINE_CYCLES, INV_SBOX, MARK_DONE,
    MARK_LAST_ROUND, SBOX, TD0, TD1, TD2, TD3, TD4, WORD_ALU_CYCLES,
};
pub use toy::{toy_victim_run, ToyVictim, DEFAULT_MIN_GAP_HOPS};
