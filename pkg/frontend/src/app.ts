/**
 * Mask studio: draw class-labeled masks, request generated variants, and
 * inspect the results with a mask-overlay toggle.
 *
 * The page talks to the generation service only through GenClient; the class
 * palette and canvas resolution come from GET /v1/models.
 */

import { GenClient, ModelInfo } from "./api.js";
import { CanvasMask, Point } from "./mask.js";
import { defaultPalette } from "./png.js";

const SCALE = 12; // display pixels per mask pixel

interface JobCard {
  id: string;
  seed: number;
  maskBytes: Uint8Array;
  element: HTMLElement;
}

class Studio {
  client: GenClient;
  model!: ModelInfo;
  mask!: CanvasMask;
  palette!: Uint8Array;
  activeClass = 1;
  brushSize = 1.5;
  drawing = false;
  stroke: Point[] = [];
  private nextSeed = 1;

  constructor(baseUrl: string) {
    this.client = new GenClient(baseUrl);
  }

  async init(): Promise<void> {
    const models = await this.withRetryBanner(() => this.client.listModels());
    if (!models.length) {
      this.banner("the generation service reports no models; run the pipeline first", false);
      return;
    }
    this.model = models.find((m) => m.id === "cond") ?? models[0];
    this.mask = new CanvasMask(this.model.final_resolution, this.model.final_resolution, this.model.num_classes);
    this.palette = defaultPalette(this.model.num_classes);
    this.buildControls();
    this.bindCanvas();
    this.redraw();
  }

  private el<T extends HTMLElement>(id: string): T {
    return document.getElementById(id) as T;
  }

  private banner(text: string, retryable: boolean): void {
    const box = this.el<HTMLDivElement>("banner");
    box.textContent = text;
    box.style.display = text ? "block" : "none";
    if (retryable) {
      const btn = document.createElement("button");
      btn.textContent = "retry";
      btn.onclick = () => {
        box.style.display = "none";
        void this.init();
      };
      box.appendChild(btn);
    }
  }

  private async withRetryBanner<T>(fn: () => Promise<T>): Promise<T> {
    try {
      return await fn();
    } catch (err) {
      this.banner(`service unreachable: ${err}`, true);
      throw err;
    }
  }

  private buildControls(): void {
    const paletteBox = this.el<HTMLDivElement>("palette");
    paletteBox.innerHTML = "";
    this.model.class_names.forEach((name, cls) => {
      const btn = document.createElement("button");
      btn.textContent = cls === 0 ? `${name} (eraser)` : name;
      const [r, g, b] = this.palette.subarray(cls * 3, cls * 3 + 3);
      btn.style.borderColor = `rgb(${r},${g},${b})`;
      btn.className = cls === this.activeClass ? "active" : "";
      btn.onclick = () => {
        this.activeClass = cls;
        this.buildControls();
      };
      paletteBox.appendChild(btn);
    });
    this.el<HTMLInputElement>("brush").oninput = (e) => {
      this.brushSize = Number((e.target as HTMLInputElement).value);
    };
    this.el<HTMLButtonElement>("undo").onclick = () => {
      this.mask.undo();
      this.redraw();
    };
    this.el<HTMLButtonElement>("clear").onclick = () => {
      this.mask.clear();
      this.redraw();
    };
    this.el<HTMLButtonElement>("generate").onclick = () => void this.generate(1);
    this.el<HTMLButtonElement>("variants").onclick = () => void this.generate(3);
  }

  private canvasPoint(ev: MouseEvent): Point {
    const canvas = this.el<HTMLCanvasElement>("canvas");
    const rect = canvas.getBoundingClientRect();
    return {
      x: ((ev.clientX - rect.left) / rect.width) * this.mask.width,
      y: ((ev.clientY - rect.top) / rect.height) * this.mask.height,
    };
  }

  private bindCanvas(): void {
    const canvas = this.el<HTMLCanvasElement>("canvas");
    canvas.width = this.mask.width * SCALE;
    canvas.height = this.mask.height * SCALE;
    canvas.onmousedown = (ev) => {
      this.drawing = true;
      this.stroke = [this.canvasPoint(ev)];
    };
    canvas.onmousemove = (ev) => {
      if (!this.drawing) return;
      this.stroke.push(this.canvasPoint(ev));
      if (this.stroke.length > 64) this.commitStroke();
    };
    const finish = () => {
      if (this.drawing) this.commitStroke();
      this.drawing = false;
    };
    canvas.onmouseup = finish;
    canvas.onmouseleave = finish;
  }

  private commitStroke(): void {
    if (this.stroke.length) {
      this.mask.paint(this.stroke, this.activeClass, this.brushSize);
      this.stroke = [this.stroke[this.stroke.length - 1]];
      this.redraw();
    }
  }

  redraw(): void {
    const canvas = this.el<HTMLCanvasElement>("canvas");
    const ctx = canvas.getContext("2d")!;
    const pixels = this.mask.toIndexArray();
    const img = ctx.createImageData(this.mask.width, this.mask.height);
    for (let i = 0; i < pixels.length; i++) {
      const cls = pixels[i];
      img.data[i * 4] = this.palette[cls * 3];
      img.data[i * 4 + 1] = this.palette[cls * 3 + 1];
      img.data[i * 4 + 2] = this.palette[cls * 3 + 2];
      img.data[i * 4 + 3] = 255;
    }
    const off = new OffscreenCanvas(this.mask.width, this.mask.height);
    off.getContext("2d")!.putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  }

  /** Submit the current mask under n distinct seeds and add gallery cards. */
  async generate(n: number): Promise<void> {
    const bytes = this.mask.exportPng(this.palette); // snapshot of this submission
    const seeds = Array.from({ length: n }, () => this.nextSeed++);
    let ids: string[];
    try {
      ids = await this.client.submitVariants(this.model.id, bytes, seeds);
    } catch (err) {
      this.banner(`generation request failed: ${err}`, true);
      return;
    }
    ids.forEach((id, i) => this.addCard({ id, seed: seeds[i], maskBytes: bytes, element: this.cardElement(id, seeds[i]) }));
  }

  private cardElement(id: string, seed: number): HTMLElement {
    const card = document.createElement("div");
    card.className = "card";
    card.innerHTML = `<header>seed ${seed} — <span class="status">queued</span></header>`;
    this.el<HTMLDivElement>("gallery").prepend(card);
    return card;
  }

  private addCard(card: JobCard): void {
    const statusSpan = card.element.querySelector(".status") as HTMLElement;
    this.client
      .pollUntilDone(card.id)
      .then(() => {
        statusSpan.textContent = "done";
        const img = document.createElement("img");
        img.src = this.client.resultUrl(card.id);
        img.width = this.mask.width * 6;
        card.element.appendChild(img);
        const toggle = document.createElement("button");
        toggle.textContent = "overlay mask";
        let overlaid = false;
        toggle.onclick = () => {
          overlaid = !overlaid;
          this.renderOverlay(card, img, overlaid);
          toggle.textContent = overlaid ? "hide mask" : "overlay mask";
        };
        card.element.appendChild(toggle);
      })
      .catch((err) => {
        statusSpan.textContent = `failed: ${err.message ?? err}`;
      });
  }

  private renderOverlay(card: JobCard, img: HTMLImageElement, on: boolean): void {
    let overlay = card.element.querySelector("canvas.overlay") as HTMLCanvasElement | null;
    if (!on) {
      overlay?.remove();
      return;
    }
    if (!overlay) {
      overlay = document.createElement("canvas");
      overlay.className = "overlay";
      overlay.width = this.mask.width;
      overlay.height = this.mask.height;
      overlay.style.width = `${img.width}px`;
      card.element.appendChild(overlay);
    }
    const { mask } = CanvasMask.importPng(card.maskBytes, this.model.num_classes);
    const ctx = overlay.getContext("2d")!;
    const data = ctx.createImageData(mask.width, mask.height);
    const pixels = mask.toIndexArray();
    for (let i = 0; i < pixels.length; i++) {
      const cls = pixels[i];
      data.data[i * 4] = this.palette[cls * 3];
      data.data[i * 4 + 1] = this.palette[cls * 3 + 1];
      data.data[i * 4 + 2] = this.palette[cls * 3 + 2];
      data.data[i * 4 + 3] = cls === 0 ? 0 : 140;
    }
    ctx.putImageData(data, 0, 0);
  }
}

const base = new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8642";
void new Studio(base).init();
