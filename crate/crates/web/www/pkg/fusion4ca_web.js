export class Budget {
    static __wrap(ptr) {
        const obj = Object.create(Budget.prototype);
        obj.__wbg_ptr = ptr;
        BudgetFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        BudgetFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_budget_free(ptr, 0);
    }
    /**
     * @returns {number}
     */
    get inference() {
        const ret = wasm.__wbg_get_budget_inference(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * Adapter + coordinate-attention parameters over the rest of the
     * inference model.
     * @returns {number}
     */
    get overhead() {
        const ret = wasm.__wbg_get_budget_overhead(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get training() {
        const ret = wasm.__wbg_get_budget_training(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * @param {number} arg0
     */
    set inference(arg0) {
        wasm.__wbg_set_budget_inference(this.__wbg_ptr, arg0);
    }
    /**
     * Adapter + coordinate-attention parameters over the rest of the
     * inference model.
     * @param {number} arg0
     */
    set overhead(arg0) {
        wasm.__wbg_set_budget_overhead(this.__wbg_ptr, arg0);
    }
    /**
     * @param {number} arg0
     */
    set training(arg0) {
        wasm.__wbg_set_budget_training(this.__wbg_ptr, arg0);
    }
}
if (Symbol.dispose) Budget.prototype[Symbol.dispose] = Budget.prototype.free;

/**
 * An RGBA raster ready for `ImageData`.
 */
export class Raster {
    static __wrap(ptr) {
        const obj = Object.create(Raster.prototype);
        obj.__wbg_ptr = ptr;
        RasterFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        RasterFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_raster_free(ptr, 0);
    }
    /**
     * @returns {number}
     */
    get height() {
        const ret = wasm.raster_height(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * @returns {Uint8Array}
     */
    get rgba() {
        const ret = wasm.raster_rgba(this.__wbg_ptr);
        var v1 = getArrayU8FromWasm0(ret[0], ret[1]).slice();
        wasm.__wbindgen_free(ret[0], ret[1] * 1, 1);
        return v1;
    }
    /**
     * @returns {number}
     */
    get width() {
        const ret = wasm.raster_width(this.__wbg_ptr);
        return ret >>> 0;
    }
}
if (Symbol.dispose) Raster.prototype[Symbol.dispose] = Raster.prototype.free;

export class SceneView {
    static __wrap(ptr) {
        const obj = Object.create(SceneView.prototype);
        obj.__wbg_ptr = ptr;
        SceneViewFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        SceneViewFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_sceneview_free(ptr, 0);
    }
    /**
     * @returns {Raster}
     */
    get bev() {
        const ret = wasm.sceneview_bev(this.__wbg_ptr);
        return Raster.__wrap(ret);
    }
    /**
     * @returns {Raster}
     */
    get camera() {
        const ret = wasm.sceneview_camera(this.__wbg_ptr);
        return Raster.__wrap(ret);
    }
    /**
     * @returns {number}
     */
    get meteors() {
        const ret = wasm.sceneview_meteors(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * @returns {number}
     */
    get platforms() {
        const ret = wasm.sceneview_platforms(this.__wbg_ptr);
        return ret >>> 0;
    }
    /**
     * @returns {number}
     */
    get points() {
        const ret = wasm.sceneview_points(this.__wbg_ptr);
        return ret >>> 0;
    }
}
if (Symbol.dispose) SceneView.prototype[Symbol.dispose] = SceneView.prototype.free;

export class ScoreView {
    static __wrap(ptr) {
        const obj = Object.create(ScoreView.prototype);
        obj.__wbg_ptr = ptr;
        ScoreViewFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        ScoreViewFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_scoreview_free(ptr, 0);
    }
    /**
     * @returns {Raster}
     */
    get bev() {
        const ret = wasm.scoreview_bev(this.__wbg_ptr);
        return Raster.__wrap(ret);
    }
    /**
     * @returns {number}
     */
    get maoe() {
        const ret = wasm.scoreview_maoe(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get map() {
        const ret = wasm.scoreview_map(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get mase() {
        const ret = wasm.scoreview_mase(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get mate() {
        const ret = wasm.scoreview_mate(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get nds_lite() {
        const ret = wasm.scoreview_nds_lite(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get predictions() {
        const ret = wasm.scoreview_predictions(this.__wbg_ptr);
        return ret >>> 0;
    }
}
if (Symbol.dispose) ScoreView.prototype[Symbol.dispose] = ScoreView.prototype.free;

/**
 * @param {boolean} align
 * @param {boolean} auxbranch
 * @param {boolean} adapter
 * @param {boolean} coordatt
 * @returns {Budget}
 */
export function budget(align, auxbranch, adapter, coordatt) {
    const ret = wasm.budget(align, auxbranch, adapter, coordatt);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return Budget.__wrap(ret[0]);
}

/**
 * @param {bigint} seed
 * @param {number} meteors
 * @param {boolean} dim
 * @returns {SceneView}
 */
export function scene_view(seed, meteors, dim) {
    const ret = wasm.scene_view(seed, meteors, dim);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return SceneView.__wrap(ret[0]);
}

/**
 * @param {bigint} seed
 * @param {number} meteors
 * @param {boolean} dim
 * @param {number} trans_std
 * @param {number} yaw_std
 * @param {number} drop
 * @param {number} false_pos
 * @param {bigint} noise_seed
 * @returns {ScoreView}
 */
export function score(seed, meteors, dim, trans_std, yaw_std, drop, false_pos, noise_seed) {
    const ret = wasm.score(seed, meteors, dim, trans_std, yaw_std, drop, false_pos, noise_seed);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return ScoreView.__wrap(ret[0]);
}
function __wbg_get_imports() {
    const import0 = {
        __proto__: null,
        __wbg_Error_30c8987f7c2ed4e2: function(arg0, arg1) {
            const ret = Error(getStringFromWasm0(arg0, arg1));
            return ret;
        },
        __wbg___wbindgen_throw_41e9ee4f547fc59a: function(arg0, arg1) {
            throw new Error(getStringFromWasm0(arg0, arg1));
        },
        __wbindgen_init_externref_table: function() {
            const table = wasm.__wbindgen_externrefs;
            const offset = table.grow(4);
            table.set(0, undefined);
            table.set(offset + 0, undefined);
            table.set(offset + 1, null);
            table.set(offset + 2, true);
            table.set(offset + 3, false);
        },
    };
    return {
        __proto__: null,
        "./fusion4ca_web_bg.js": import0,
    };
}

const BudgetFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_budget_free(ptr, 1));
const RasterFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_raster_free(ptr, 1));
const SceneViewFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_sceneview_free(ptr, 1));
const ScoreViewFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_scoreview_free(ptr, 1));

function getArrayU8FromWasm0(ptr, len) {
    ptr = ptr >>> 0;
    return getUint8ArrayMemory0().subarray(ptr / 1, ptr / 1 + len);
}

function getStringFromWasm0(ptr, len) {
    return decodeText(ptr >>> 0, len);
}

let cachedUint8ArrayMemory0 = null;
function getUint8ArrayMemory0() {
    if (cachedUint8ArrayMemory0 === null || cachedUint8ArrayMemory0.byteLength === 0) {
        cachedUint8ArrayMemory0 = new Uint8Array(wasm.memory.buffer);
    }
    return cachedUint8ArrayMemory0;
}

function takeFromExternrefTable0(idx) {
    const value = wasm.__wbindgen_externrefs.get(idx);
    wasm.__externref_table_dealloc(idx);
    return value;
}

let cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
cachedTextDecoder.decode();
const MAX_SAFARI_DECODE_BYTES = 2146435072;
let numBytesDecoded = 0;
function decodeText(ptr, len) {
    numBytesDecoded += len;
    if (numBytesDecoded >= MAX_SAFARI_DECODE_BYTES) {
        cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
        cachedTextDecoder.decode();
        numBytesDecoded = len;
    }
    return cachedTextDecoder.decode(getUint8ArrayMemory0().subarray(ptr, ptr + len));
}

let wasmModule, wasmInstance, wasm;
function __wbg_finalize_init(instance, module) {
    wasmInstance = instance;
    wasm = instance.exports;
    wasmModule = module;
    cachedUint8ArrayMemory0 = null;
    wasm.__wbindgen_start();
    return wasm;
}

async function __wbg_load(module, imports) {
    if (typeof Response === 'function' && module instanceof Response) {
        if (!module.ok) {
            throw new Error(`failed to fetch Wasm: ${module.status} ${module.statusText} fetching '${module.url}'`);
        }

        if (typeof WebAssembly.instantiateStreaming === 'function') {
            try {
                return await WebAssembly.instantiateStreaming(module, imports);
            } catch (e) {
                const validResponse = expectedResponseType(module.type);

                if (validResponse && module.headers.get('Content-Type') !== 'application/wasm') {
                    console.warn("`WebAssembly.instantiateStreaming` failed because your server does not serve Wasm with `application/wasm` MIME type. Falling back to `WebAssembly.instantiate` which is slower. Original error:\n", e);

                } else { throw e; }
            }
        }

        const bytes = await module.arrayBuffer();
        return await WebAssembly.instantiate(bytes, imports);
    } else {
        const instance = await WebAssembly.instantiate(module, imports);

        if (instance instanceof WebAssembly.Instance) {
            return { instance, module };
        } else {
            return instance;
        }
    }

    function expectedResponseType(type) {
        switch (type) {
            case 'basic': case 'cors': case 'default': return true;
        }
        return false;
    }
}

function initSync(module) {
    if (wasm !== undefined) return wasm;


    if (module !== undefined) {
        if (Object.getPrototypeOf(module) === Object.prototype) {
            ({module} = module)
        } else {
            console.warn('using deprecated parameters for `initSync()`; pass a single object instead')
        }
    }

    const imports = __wbg_get_imports();
    if (!(module instanceof WebAssembly.Module)) {
        module = new WebAssembly.Module(module);
    }
    const instance = new WebAssembly.Instance(module, imports);
    return __wbg_finalize_init(instance, module);
}

async function __wbg_init(module_or_path) {
    if (wasm !== undefined) return wasm;


    if (module_or_path !== undefined) {
        if (Object.getPrototypeOf(module_or_path) === Object.prototype) {
            ({module_or_path} = module_or_path)
        } else {
            console.warn('using deprecated parameters for the initialization function; pass a single object instead')
        }
    }

    if (module_or_path === undefined) {
        module_or_path = new URL('fusion4ca_web_bg.wasm', import.meta.url);
    }
    const imports = __wbg_get_imports();

    if (typeof module_or_path === 'string' || (typeof Request === 'function' && module_or_path instanceof Request) || (typeof URL === 'function' && module_or_path instanceof URL)) {
        module_or_path = fetch(module_or_path);
    }

    const { instance, module } = await __wbg_load(await module_or_path, imports);

    return __wbg_finalize_init(instance, module);
}

export { initSync, __wbg_init as default };
