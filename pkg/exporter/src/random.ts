/** Deterministic PRNG utilities (splitmix64 core, Box-Muller gaussians). */

const MASK64 = (1n << 64n) - 1n;

export class SplitMix64 {
  private state: bigint;

  constructor(seed: bigint | number) {
    this.state = BigInt(seed) & MASK64;
  }

  nextU64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    return (z ^ (z >> 31n)) & MASK64;
  }

  /** Uniform in [0, 1) with 53 bits of randomness. */
  nextFloat(): number {
    return Number(this.nextU64() >> 11n) / 2 ** 53;
  }

  /** Standard normal via Box-Muller. */
  nextGaussian(): number {
    let u = this.nextFloat();
    while (u === 0) u = this.nextFloat();
    const v = this.nextFloat();
    return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
  }
}

/** Stable 64-bit hash of a string (FNV-1a widened through splitmix). */
export function hash64(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  for (const ch of text) {
    for (const byte of Buffer.from(ch, "utf-8")) {
      h = ((h ^ BigInt(byte)) * 0x100000001b3n) & MASK64;
    }
  }
  return new SplitMix64(h).nextU64();
}
