/** Editor wiring: sample, paint, propagate, steer components. */

import { ApiClient, ApiError, ModelInfo } from "./api.js";
import { debounce, SingleFlight } from "./debounce.js";
import { EditBuffer, hexToRgb, Rgb } from "./editBuffer.js";
import { canvasToPixel, displayScale, drawPng, SLIDER } from "./view.js";

const api = new ApiClient("");

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
};

const banner = el<HTMLDivElement>("banner");
const bannerText = el<HTMLSpanElement>("banner-text");
const meanCanvas = el<HTMLCanvasElement>("mean-canvas");
const sampleCanvas = el<HTMLCanvasElement>("sample-canvas");
const overlayCanvas = el<HTMLCanvasElement>("overlay-canvas");
const seedInput = el<HTMLInputElement>("seed");
const colorInput = el<HTMLInputElement>("paint-color");
const sliderPanel = el<HTMLDivElement>("sliders");

let model: ModelInfo | null = null;
let sessionId: string | null = null;
let scale = 1;
let buffer: EditBuffer | null = null;
let painting = false;
let sliderInputs: HTMLInputElement[] = [];

function showError(message: string): void {
  bannerText.textContent = message;
  banner.hidden = false;
}

function reportFailure(err: unknown): void {
  if (err instanceof ApiError) showError(err.message);
  else showError(String(err));
}

el<HTMLButtonElement>("banner-dismiss").onclick = () => {
  banner.hidden = true;
};

function brushSize(): 1 | 3 {
  const checked = document.querySelector<HTMLInputElement>(
    'input[name="brush"]:checked',
  );
  return checked?.value === "3" ? 3 : 1;
}

function drawOverlay(): void {
  const ctx = overlayCanvas.getContext("2d");
  if (!ctx || !buffer) return;
  ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
  for (const mark of buffer.pixels()) {
    const [r, g, b] = mark.color;
    ctx.fillStyle = `rgb(${Math.round(r * 255)}, ${Math.round(g * 255)}, ${Math.round(b * 255)})`;
    ctx.fillRect(mark.x * scale, mark.y * scale, scale, scale);
  }
}

function paintAt(offsetX: number, offsetY: number): void {
  if (!model || !buffer || sessionId === null) return;
  const pos = canvasToPixel(offsetX, offsetY, scale, model.width, model.height);
  if (!pos) return;
  const color: Rgb = hexToRgb(colorInput.value);
  buffer.paint(pos.x, pos.y, color, brushSize());
  drawOverlay();
}

overlayCanvas.addEventListener("mousedown", (evt) => {
  painting = true;
  paintAt(evt.offsetX, evt.offsetY);
});
overlayCanvas.addEventListener("mousemove", (evt) => {
  if (painting) paintAt(evt.offsetX, evt.offsetY);
});
for (const type of ["mouseup", "mouseleave"]) {
  overlayCanvas.addEventListener(type, () => {
    painting = false;
  });
}

async function newSample(): Promise<void> {
  if (!model) return;
  try {
    const resp = await api.newSample(Number(seedInput.value) || 0);
    sessionId = resp.session_id;
    await drawPng(meanCanvas, resp.mean_png, scale);
    await drawPng(sampleCanvas, resp.sample_png, scale);
    buffer?.clear();
    drawOverlay();
    resetSliderPositions();
  } catch (err) {
    reportFailure(err);
  }
}

async function propagate(): Promise<void> {
  if (sessionId === null || !buffer) {
    showError("draw a sample first");
    return;
  }
  try {
    const resp = await api.edit(sessionId, buffer.toEdits());
    await drawPng(sampleCanvas, resp.conditioned_png, scale);
    buffer.clear(); // markers clear only on success
    drawOverlay();
  } catch (err) {
    reportFailure(err);
  }
}

async function resetImage(): Promise<void> {
  if (sessionId === null) return;
  try {
    const resp = await api.edit(sessionId, [], true);
    await drawPng(sampleCanvas, resp.conditioned_png, scale);
    buffer?.clear();
    drawOverlay();
  } catch (err) {
    reportFailure(err);
  }
}

const scaleFlight = new SingleFlight<number[]>(async (coefficients) => {
  if (sessionId === null) return;
  try {
    const resp = await api.scale(sessionId, coefficients);
    await drawPng(sampleCanvas, resp.sample_png, scale);
  } catch (err) {
    reportFailure(err);
  }
});

const submitSliders = debounce(() => {
  scaleFlight.submit(sliderInputs.map((s) => Number(s.value)));
}, 150);

function resetSliderPositions(): void {
  for (const slider of sliderInputs) {
    slider.value = String(SLIDER.neutral);
    slider.dispatchEvent(new Event("label-refresh"));
  }
}

function buildSliders(rank: number): void {
  sliderPanel.textContent = "";
  sliderInputs = [];
  for (let i = 0; i < rank; i++) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = `component ${i}`;
    const value = document.createElement("span");
    value.className = "slider-value";
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(SLIDER.min);
    input.max = String(SLIDER.max);
    input.step = String(SLIDER.step);
    input.value = String(SLIDER.neutral);
    const refresh = () => {
      value.textContent = Number(input.value).toFixed(1);
    };
    refresh();
    input.addEventListener("input", () => {
      refresh();
      submitSliders();
    });
    input.addEventListener("label-refresh", refresh);
    row.append(label, input, value);
    sliderPanel.append(row);
    sliderInputs.push(input);
  }
  const reset = document.createElement("button");
  reset.textContent = "Reset sliders";
  reset.onclick = () => {
    resetSliderPositions();
    submitSliders();
    submitSliders.flush();
  };
  sliderPanel.append(reset);
}

async function init(): Promise<void> {
  try {
    model = await api.getModel();
  } catch (err) {
    reportFailure(err);
    return;
  }
  scale = displayScale(model.width, model.height);
  for (const canvas of [meanCanvas, sampleCanvas, overlayCanvas]) {
    canvas.width = model.width * scale;
    canvas.height = model.height * scale;
  }
  buffer = new EditBuffer(model.width, model.height, model.channels);
  buildSliders(model.rank);
  el<HTMLSpanElement>("model-info").textContent =
    `${model.width}x${model.height}x${model.channels}, rank ${model.rank}`;
  el<HTMLButtonElement>("new-sample").onclick = () => void newSample();
  el<HTMLButtonElement>("propagate").onclick = () => void propagate();
  el<HTMLButtonElement>("reset-image").onclick = () => void resetImage();
}

void init();
