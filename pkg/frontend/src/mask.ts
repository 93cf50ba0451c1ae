/**
 * In-memory mask model for the studio canvas.
 *
 * The mask keeps one binary bitmap per foreground class. Painting enforces
 * exclusivity: assigning a pixel to one class clears it from every other
 * class (class 0 acts as an eraser). Every paint pushes a snapshot onto a
 * bounded undo stack.
 */

import { IndexedPng, decodeIndexedPng, defaultPalette, encodeIndexedPng } from "./png.js";

export interface Point {
  x: number;
  y: number;
}

export class CanvasMask {
  readonly width: number;
  readonly height: number;
  /** Total class count including background (class 0). */
  readonly numClasses: number;
  /** One bitmap per foreground class; layers[c - 1] holds class c. */
  layers: Uint8Array[];
  private undoStack: Uint8Array[][] = [];
  readonly undoLimit: number;

  constructor(width: number, height: number, numClasses: number, undoLimit = 50) {
    if (numClasses < 2) throw new Error("need background plus at least one foreground class");
    this.width = width;
    this.height = height;
    this.numClasses = numClasses;
    this.undoLimit = undoLimit;
    this.layers = Array.from({ length: numClasses - 1 }, () => new Uint8Array(width * height));
  }

  classAt(x: number, y: number): number {
    const idx = y * this.width + x;
    for (let c = 0; c < this.layers.length; c++) {
      if (this.layers[c][idx]) return c + 1;
    }
    return 0;
  }

  private snapshot(): Uint8Array[] {
    return this.layers.map((layer) => new Uint8Array(layer));
  }

  private pushUndo(): void {
    this.undoStack.push(this.snapshot());
    if (this.undoStack.length > this.undoLimit) {
      this.undoStack.shift();
    }
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  /**
   * Rasterize a round-brush stroke along a polyline and assign it to cls.
   *
   * Out-of-bounds points are clipped; brush radius 0 marks single pixels.
   * Class 0 erases. Pushes one undo entry per call.
   */
  paint(stroke: Point[], cls: number, brush: number): void {
    if (cls < 0 || cls >= this.numClasses) throw new Error(`class ${cls} out of range`);
    if (stroke.length === 0) return;
    this.pushUndo();
    const stamp = (px: number, py: number) => {
      const r = Math.max(0, brush);
      const x0 = Math.max(0, Math.ceil(px - r));
      const x1 = Math.min(this.width - 1, Math.floor(px + r));
      const y0 = Math.max(0, Math.ceil(py - r));
      const y1 = Math.min(this.height - 1, Math.floor(py + r));
      for (let y = y0; y <= y1; y++) {
        for (let x = x0; x <= x1; x++) {
          if ((x - px) * (x - px) + (y - py) * (y - py) <= r * r) {
            this.setPixel(x, y, cls);
          }
        }
      }
    };
    let prev = stroke[0];
    stamp(prev.x, prev.y);
    for (let i = 1; i < stroke.length; i++) {
      const cur = stroke[i];
      const dist = Math.hypot(cur.x - prev.x, cur.y - prev.y);
      const steps = Math.max(1, Math.ceil(dist * 2));
      for (let s = 1; s <= steps; s++) {
        stamp(prev.x + ((cur.x - prev.x) * s) / steps, prev.y + ((cur.y - prev.y) * s) / steps);
      }
      prev = cur;
    }
  }

  private setPixel(x: number, y: number, cls: number): void {
    const idx = y * this.width + x;
    for (let c = 0; c < this.layers.length; c++) {
      this.layers[c][idx] = c + 1 === cls ? 1 : 0;
    }
  }

  /** Restore the state before the most recent paint; false if nothing to undo. */
  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.layers = prev;
    return true;
  }

  clear(): void {
    this.pushUndo();
    for (const layer of this.layers) layer.fill(0);
  }

  toIndexArray(): Uint8Array {
    const out = new Uint8Array(this.width * this.height);
    for (let c = 0; c < this.layers.length; c++) {
      const layer = this.layers[c];
      for (let i = 0; i < layer.length; i++) {
        if (layer[i]) out[i] = c + 1;
      }
    }
    return out;
  }

  static fromIndexArray(width: number, height: number, pixels: Uint8Array, numClasses: number): CanvasMask {
    const mask = new CanvasMask(width, height, numClasses);
    for (let i = 0; i < pixels.length; i++) {
      const cls = pixels[i];
      if (cls >= numClasses) throw new Error(`pixel class ${cls} out of range for ${numClasses} classes`);
      if (cls > 0) mask.layers[cls - 1][i] = 1;
    }
    return mask;
  }

  /** Serialize to indexed PNG bytes (canonical layout, byte-stable). */
  exportPng(palette?: Uint8Array): Uint8Array {
    return encodeIndexedPng({
      width: this.width,
      height: this.height,
      pixels: this.toIndexArray(),
      palette: palette ?? defaultPalette(this.numClasses),
    });
  }

  /** Inverse of exportPng; class layers survive the round trip losslessly. */
  static importPng(bytes: Uint8Array, numClasses: number): { mask: CanvasMask; image: IndexedPng } {
    const image = decodeIndexedPng(bytes);
    const mask = CanvasMask.fromIndexArray(image.width, image.height, image.pixels, numClasses);
    return { mask, image };
  }
}
