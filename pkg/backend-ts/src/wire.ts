/**
 * Binary framing for the co-simulation request/reply protocol.
 *
 * Every frame on the stream is:
 *
 *     u32  payload length, little-endian (counts the kind byte + body)
 *     u8   message kind
 *     ...  kind-specific body
 *
 * Primitives are little-endian throughout: reals are IEEE-754 binary64,
 * integers signed 32-bit, booleans one byte (strictly 0 or 1), strings a
 * u32 byte length followed by UTF-8, arrays a u32 count followed by the
 * elements. A reply reuses its request's kind code with the high bit set.
 * The dialog is strictly serial, so frames carry no correlation ids.
 */

export const PROTOCOL_VERSION = 1;
export const MAX_FRAME_SIZE = 16 * 1024 * 1024;
export const REPLY_BIT = 0x80;

export enum Status {
  Ok = 0,
  Warning = 1,
  Discard = 2,
  Error = 3,
  Fatal = 4,
}

const KIND_CODES = {
  HANDSHAKE: 0x01,
  SETUP_EXPERIMENT: 0x10,
  ENTER_INIT: 0x11,
  EXIT_INIT: 0x12,
  DO_STEP: 0x13,
  SET_REAL: 0x14,
  SET_INT: 0x15,
  SET_BOOL: 0x16,
  SET_STRING: 0x17,
  GET_REAL: 0x18,
  GET_INT: 0x19,
  GET_BOOL: 0x1a,
  GET_STRING: 0x1b,
  TERMINATE: 0x1c,
  FREE_INSTANCE: 0x1d,
} as const;

export type RequestType = keyof typeof KIND_CODES;
export type GetType = "GET_REAL" | "GET_INT" | "GET_BOOL" | "GET_STRING";

const CODE_TO_TYPE = new Map<number, RequestType>(
  (Object.keys(KIND_CODES) as RequestType[]).map((t) => [KIND_CODES[t], t]),
);

export function kindCode(type: RequestType): number {
  return KIND_CODES[type];
}

export type WireValue = number | boolean | string;

export type Message =
  | { type: "HANDSHAKE"; instanceName: string; authToken: string; protocolVersion: number }
  | { type: "SETUP_EXPERIMENT"; startTime: number; stopTime: number | null; tolerance: number | null }
  | { type: "ENTER_INIT" }
  | { type: "EXIT_INIT" }
  | { type: "DO_STEP"; currentTime: number; stepSize: number }
  | { type: "SET_REAL"; vrs: number[]; values: number[] }
  | { type: "SET_INT"; vrs: number[]; values: number[] }
  | { type: "SET_BOOL"; vrs: number[]; values: boolean[] }
  | { type: "SET_STRING"; vrs: number[]; values: string[] }
  | { type: "GET_REAL"; vrs: number[] }
  | { type: "GET_INT"; vrs: number[] }
  | { type: "GET_BOOL"; vrs: number[] }
  | { type: "GET_STRING"; vrs: number[] }
  | { type: "TERMINATE" }
  | { type: "FREE_INSTANCE" }
  | { type: "STATUS_REPLY"; requestKind: RequestType; status: Status }
  | { type: "VALUES_REPLY"; requestKind: GetType; status: Status; values: WireValue[] };

export type Request = Exclude<Message, { type: "STATUS_REPLY" } | { type: "VALUES_REPLY" }>;
export type Reply = Extract<Message, { type: "STATUS_REPLY" } | { type: "VALUES_REPLY" }>;

export function isReply(message: Message): message is Reply {
  return message.type === "STATUS_REPLY" || message.type === "VALUES_REPLY";
}

/** Fatal wire-level violation; the connection must be torn down. */
export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolError";
  }
}

// -- encoding ---------------------------------------------------------------

class ByteWriter {
  private parts: Buffer[] = [];

  u8(value: number): void {
    this.parts.push(Buffer.from([value]));
  }

  u16(value: number): void {
    const buf = Buffer.allocUnsafe(2);
    buf.writeUInt16LE(value, 0);
    this.parts.push(buf);
  }

  u32(value: number): void {
    if (!Number.isInteger(value) || value < 0 || value > 0xffffffff) {
      throw new ProtocolError(`value reference ${value} outside unsigned 32-bit range`);
    }
    const buf = Buffer.allocUnsafe(4);
    buf.writeUInt32LE(value, 0);
    this.parts.push(buf);
  }

  i32(value: number): void {
    if (!Number.isInteger(value) || value < -(2 ** 31) || value > 2 ** 31 - 1) {
      throw new ProtocolError(`integer ${value} outside signed 32-bit range`);
    }
    const buf = Buffer.allocUnsafe(4);
    buf.writeInt32LE(value, 0);
    this.parts.push(buf);
  }

  f64(value: number): void {
    const buf = Buffer.allocUnsafe(8);
    buf.writeDoubleLE(value, 0);
    this.parts.push(buf);
  }

  bool(value: boolean): void {
    this.parts.push(Buffer.from([value ? 1 : 0]));
  }

  string(text: string): void {
    if (!text.isWellFormed()) {
      throw new ProtocolError("string not encodable as UTF-8: lone surrogate");
    }
    const raw = Buffer.from(text, "utf8");
    this.u32(raw.length);
    this.parts.push(raw);
  }

  concat(): Buffer {
    return Buffer.concat(this.parts);
  }
}

function valueSlot(type: string): "f64" | "i32" | "bool" | "str" {
  if (type.endsWith("_REAL")) return "f64";
  if (type.endsWith("_INT")) return "i32";
  if (type.endsWith("_BOOL")) return "bool";
  return "str";
}

function writeValueArray(w: ByteWriter, type: string, values: WireValue[]): void {
  w.u32(values.length);
  const slot = valueSlot(type);
  for (const value of values) {
    switch (slot) {
      case "f64":
        w.f64(value as number);
        break;
      case "i32":
        w.i32(value as number);
        break;
      case "bool":
        w.bool(value as boolean);
        break;
      case "str":
        w.string(value as string);
        break;
    }
  }
}

function writeVrArray(w: ByteWriter, vrs: number[]): void {
  w.u32(vrs.length);
  for (const vr of vrs) w.u32(vr);
}

/**
 * Serialize one message into its exact frame bytes. Deterministic: the same
 * message always yields the same bytes. Throws ProtocolError for values the
 * wire format cannot carry.
 */
export function encodeMessage(message: Message): Buffer {
  const body = new ByteWriter();
  let code: number;

  switch (message.type) {
    case "HANDSHAKE":
      code = KIND_CODES.HANDSHAKE;
      body.u16(message.protocolVersion);
      body.string(message.instanceName);
      body.string(message.authToken);
      break;
    case "SETUP_EXPERIMENT":
      code = KIND_CODES.SETUP_EXPERIMENT;
      body.f64(message.startTime);
      body.bool(message.stopTime !== null);
      body.f64(message.stopTime ?? 0);
      body.bool(message.tolerance !== null);
      body.f64(message.tolerance ?? 0);
      break;
    case "DO_STEP":
      code = KIND_CODES.DO_STEP;
      body.f64(message.currentTime);
      body.f64(message.stepSize);
      break;
    case "ENTER_INIT":
    case "EXIT_INIT":
    case "TERMINATE":
    case "FREE_INSTANCE":
      code = KIND_CODES[message.type];
      break;
    case "SET_REAL":
    case "SET_INT":
    case "SET_BOOL":
    case "SET_STRING":
      if (message.vrs.length !== message.values.length) {
        throw new ProtocolError(
          `${message.type}: ${message.vrs.length} value references but ` +
            `${message.values.length} values`,
        );
      }
      code = KIND_CODES[message.type];
      writeVrArray(body, message.vrs);
      writeValueArray(body, message.type, message.values);
      break;
    case "GET_REAL":
    case "GET_INT":
    case "GET_BOOL":
    case "GET_STRING":
      code = KIND_CODES[message.type];
      writeVrArray(body, message.vrs);
      break;
    case "STATUS_REPLY":
      code = KIND_CODES[message.requestKind] | REPLY_BIT;
      body.u8(message.status);
      break;
    case "VALUES_REPLY":
      code = KIND_CODES[message.requestKind] | REPLY_BIT;
      body.u8(message.status);
      writeValueArray(body, message.requestKind, message.values);
      break;
  }

  const payload = body.concat();
  const payloadLength = 1 + payload.length;
  if (payloadLength > MAX_FRAME_SIZE) {
    throw new ProtocolError(
      `frame of ${payloadLength} bytes exceeds the ${MAX_FRAME_SIZE} byte cap`,
    );
  }
  const frame = Buffer.allocUnsafe(4 + payloadLength);
  frame.writeUInt32LE(payloadLength, 0);
  frame.writeUInt8(code, 4);
  payload.copy(frame, 5);
  return frame;
}

// -- decoding ---------------------------------------------------------------

const utf8Strict = new TextDecoder("utf-8", { fatal: true });

class ByteReader {
  private pos = 0;

  constructor(
    private readonly data: Buffer,
    private readonly label: string,
  ) {}

  private take(n: number): Buffer {
    if (this.pos + n > this.data.length) {
      throw new ProtocolError(
        `${this.label}: body truncated (need ${n} more bytes at offset ${this.pos})`,
      );
    }
    const chunk = this.data.subarray(this.pos, this.pos + n);
    this.pos += n;
    return chunk;
  }

  u8(): number {
    return this.take(1).readUInt8(0);
  }

  u16(): number {
    return this.take(2).readUInt16LE(0);
  }

  u32(): number {
    return this.take(4).readUInt32LE(0);
  }

  i32(): number {
    return this.take(4).readInt32LE(0);
  }

  f64(): number {
    return this.take(8).readDoubleLE(0);
  }

  bool(): boolean {
    const raw = this.u8();
    if (raw !== 0 && raw !== 1) {
      throw new ProtocolError(`${this.label}: boolean byte 0x${raw.toString(16)} is not 0 or 1`);
    }
    return raw === 1;
  }

  string(): string {
    const raw = this.take(this.u32());
    try {
      return utf8Strict.decode(raw);
    } catch {
      throw new ProtocolError(`${this.label}: invalid UTF-8 in string`);
    }
  }

  status(): Status {
    const raw = this.u8();
    if (raw > Status.Fatal) {
      throw new ProtocolError(`${this.label}: unknown status code 0x${raw.toString(16)}`);
    }
    return raw as Status;
  }

  finish(): void {
    if (this.pos !== this.data.length) {
      throw new ProtocolError(`${this.label}: ${this.data.length - this.pos} trailing bytes in frame`);
    }
  }
}

function readVrArray(r: ByteReader): number[] {
  const count = r.u32();
  const vrs: number[] = [];
  for (let i = 0; i < count; i++) vrs.push(r.u32());
  return vrs;
}

function readValueArray(r: ByteReader, type: string): WireValue[] {
  const count = r.u32();
  const slot = valueSlot(type);
  const values: WireValue[] = [];
  for (let i = 0; i < count; i++) {
    if (slot === "f64") values.push(r.f64());
    else if (slot === "i32") values.push(r.i32());
    else if (slot === "bool") values.push(r.bool());
    else values.push(r.string());
  }
  return values;
}

function decodeBody(code: number, body: Buffer): Message {
  const reply = (code & REPLY_BIT) !== 0;
  const requestType = CODE_TO_TYPE.get(code & ~REPLY_BIT);
  if (requestType === undefined) {
    throw new ProtocolError(`unknown message kind 0x${code.toString(16).padStart(2, "0")}`);
  }
  const r = new ByteReader(body, reply ? `${requestType}_REPLY` : requestType);
  let message: Message;

  if (reply) {
    const status = r.status();
    if (requestType.startsWith("GET_")) {
      message = {
        type: "VALUES_REPLY",
        requestKind: requestType as GetType,
        status,
        values: readValueArray(r, requestType),
      };
    } else {
      message = { type: "STATUS_REPLY", requestKind: requestType, status };
    }
  } else {
    switch (requestType) {
      case "HANDSHAKE": {
        const protocolVersion = r.u16();
        message = {
          type: "HANDSHAKE",
          protocolVersion,
          instanceName: r.string(),
          authToken: r.string(),
        };
        break;
      }
      case "SETUP_EXPERIMENT": {
        const startTime = r.f64();
        const stopDefined = r.bool();
        const stopTime = r.f64();
        const tolDefined = r.bool();
        const tolerance = r.f64();
        message = {
          type: "SETUP_EXPERIMENT",
          startTime,
          stopTime: stopDefined ? stopTime : null,
          tolerance: tolDefined ? tolerance : null,
        };
        break;
      }
      case "DO_STEP":
        message = { type: "DO_STEP", currentTime: r.f64(), stepSize: r.f64() };
        break;
      case "ENTER_INIT":
      case "EXIT_INIT":
      case "TERMINATE":
      case "FREE_INSTANCE":
        message = { type: requestType };
        break;
      case "SET_REAL":
      case "SET_INT":
      case "SET_BOOL":
      case "SET_STRING": {
        const vrs = readVrArray(r);
        const values = readValueArray(r, requestType);
        if (vrs.length !== values.length) {
          throw new ProtocolError(
            `${requestType}: ${vrs.length} value references but ${values.length} values`,
          );
        }
        message = { type: requestType, vrs, values } as Message;
        break;
      }
      case "GET_REAL":
      case "GET_INT":
      case "GET_BOOL":
      case "GET_STRING":
        message = { type: requestType, vrs: readVrArray(r) };
        break;
    }
  }

  r.finish();
  return message;
}

/**
 * Decode the first complete frame in `data`. Returns null while fewer bytes
 * than one whole frame are buffered; throws ProtocolError on any malformed
 * frame (the connection is unrecoverable at that point).
 */
export function decodeMessage(data: Buffer): { message: Message; consumed: number } | null {
  if (data.length < 4) return null;
  const payloadLength = data.readUInt32LE(0);
  if (payloadLength > MAX_FRAME_SIZE) {
    throw new ProtocolError(
      `declared frame of ${payloadLength} bytes exceeds the ${MAX_FRAME_SIZE} byte cap`,
    );
  }
  if (payloadLength < 1) {
    throw new ProtocolError("frame declares an empty payload (no kind byte)");
  }
  const total = 4 + payloadLength;
  if (data.length < total) return null;
  const message = decodeBody(data.readUInt8(4), data.subarray(5, total));
  return { message, consumed: total };
}

/** Incremental decoder over an arbitrarily chunked byte stream. */
export class StreamDecoder {
  private buffer: Buffer = Buffer.alloc(0);

  feed(chunk: Buffer): void {
    this.buffer = this.buffer.length === 0 ? chunk : Buffer.concat([this.buffer, chunk]);
  }

  nextMessage(): Message | null {
    const decoded = decodeMessage(this.buffer);
    if (decoded === null) return null;
    this.buffer = this.buffer.subarray(decoded.consumed);
    return decoded.message;
  }

  pendingBytes(): number {
    return this.buffer.length;
  }
}
