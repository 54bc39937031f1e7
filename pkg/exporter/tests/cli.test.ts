import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import { expandTemplate, parseArgs } from "../src/cli.js";
import { decodeEmbeddingFile } from "../src/format.js";

const CLI = join(__dirname, "..", "dist", "cli.js");

function run(args: string[]): { code: number; stderr: string } {
  try {
    execFileSync("node", [CLI, ...args], { stdio: ["ignore", "pipe", "pipe"] });
    return { code: 0, stderr: "" };
  } catch (err: any) {
    return { code: err.status ?? 1, stderr: String(err.stderr ?? "") };
  }
}

function namesFile(dir: string): string {
  const path = join(dir, "names.txt");
  writeFileSync(path, "red square\nblue square\nred circle\n");
  return path;
}

describe("argument parsing", () => {
  it("applies defaults and rejects bad dims", () => {
    const req = parseArgs(["--names", "n.txt", "--out", "o.emb"]);
    expect(req.dim).toBe(32);
    expect(req.encoder).toBe("clip");
    expect(req.template).toBe("{}");
    expect(() => parseArgs(["--names", "n", "--out", "o", "--dim", "0"])).toThrow(/--dim/);
    expect(() => parseArgs(["--wat", "1"])).toThrow(/unknown flag/);
    expect(() => parseArgs(["--names", "n"])).toThrow(/usage/);
  });

  it("expands the {} placeholder or appends", () => {
    expect(expandTemplate("a photo of a {}", "red square")).toBe("a photo of a red square");
    expect(expandTemplate("a type of aircraft:", "727-200")).toBe("a type of aircraft: 727-200");
  });
});

describe("end-to-end export", () => {
  it("writes a valid file with names in order and unit rows", () => {
    const dir = mkdtempSync(join(tmpdir(), "emb-"));
    const out = join(dir, "classes.emb");
    const res = run([
      "--names", namesFile(dir),
      "--template", "a photo of a {}",
      "--dim", "16",
      "--out", out,
      "--encoder", "seeded",
    ]);
    expect(res.code).toBe(0);
    const decoded = decodeEmbeddingFile(readFileSync(out));
    expect(decoded.names).toEqual(["red square", "blue square", "red circle"]);
    expect(decoded.dim).toBe(16);
    for (const row of decoded.rows) {
      const norm = Math.sqrt(row.reduce((s, x) => s + x * x, 0));
      expect(norm).toBeCloseTo(1, 5);
    }
  });

  it("same request twice gives byte-identical files", () => {
    const dir = mkdtempSync(join(tmpdir(), "emb-"));
    const names = namesFile(dir);
    const outA = join(dir, "a.emb");
    const outB = join(dir, "b.emb");
    const args = ["--names", names, "--dim", "8", "--encoder", "seeded"];
    expect(run([...args, "--out", outA]).code).toBe(0);
    expect(run([...args, "--out", outB]).code).toBe(0);
    expect(readFileSync(outA).equals(readFileSync(outB))).toBe(true);
  });

  it("missing names file fails with a nonzero exit", () => {
    const dir = mkdtempSync(join(tmpdir(), "emb-"));
    const res = run(["--names", join(dir, "nope.txt"), "--out", join(dir, "o.emb")]);
    expect(res.code).not.toBe(0);
  });

  it("duplicate names are rejected", () => {
    const dir = mkdtempSync(join(tmpdir(), "emb-"));
    const path = join(dir, "names.txt");
    writeFileSync(path, "a\na\n");
    const res = run(["--names", path, "--out", join(dir, "o.emb"), "--encoder", "seeded"]);
    expect(res.code).not.toBe(0);
    expect(res.stderr).toMatch(/unique/);
  });

  it("clip backend without local weights exits nonzero with a hint", () => {
    const dir = mkdtempSync(join(tmpdir(), "emb-"));
    const res = run([
      "--names", namesFile(dir),
      "--out", join(dir, "o.emb"),
      "--encoder", "clip",
    ]);
    expect(res.code).toBe(3);
    expect(res.stderr).toMatch(/--encoder seeded/);
  }, 30000);
});
