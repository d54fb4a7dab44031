/** Deterministic PRNG streams so every export is bit-reproducible. */

export function splitmix32(seed: number): () => number {
    let state = seed >>> 0;
    return () => {
        state = (state + 0x9e3779b9) >>> 0;
        let z = state;
        z = Math.imul(z ^ (z >>> 16), 0x21f0aaad);
        z = Math.imul(z ^ (z >>> 15), 0x735a2d97);
        z = z ^ (z >>> 15);
        return (z >>> 0) / 4294967296;
    };
}

/** Independent stream keyed by a seed and a purpose tag. */
export function stream(seed: number, tag: string): () => number {
    let h = seed >>> 0;
    for (let i = 0; i < tag.length; i++) {
        h = Math.imul(h ^ tag.charCodeAt(i), 0x01000193) >>> 0;
    }
    return splitmix32(h);
}

/** Standard normal via Box-Muller over a uniform stream. */
export function gaussian(next: () => number): () => number {
    let spare: number | null = null;
    return () => {
        if (spare !== null) {
            const v = spare;
            spare = null;
            return v;
        }
        let u = 0;
        let v = 0;
        do {
            u = next();
        } while (u <= 1e-12);
        v = next();
        const r = Math.sqrt(-2.0 * Math.log(u));
        spare = r * Math.sin(2 * Math.PI * v);
        return r * Math.cos(2 * Math.PI * v);
    };
}
